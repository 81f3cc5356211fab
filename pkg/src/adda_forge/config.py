"""Experiment config files: INI-style sections of ``key = value`` lines.

Recognised sections and keys (everything optional unless noted)::

    [data]
    kind = synthetic | idx
    # synthetic
    classes, dim, source_radius, target_radius, rotation_deg, per_class, noise
    # idx (required when kind = idx)
    source_images, source_labels, target_images, target_labels
    # idx (optional)
    eval_images, eval_labels, source_subsample, target_subsample, image_size

    [model]
    preset, hidden, disc_hidden, image_size

    [adapt]
    every AdaptConfig field (step1_lr, step2_iters, z, disc_variant, ...)

    [kernel]
    family, sigmas, epsilon

    [ablate]
    disc_variants, enc_variants, target_reg, seeds

    [sweep]
    z_values

    [output]
    dir

Unknown sections or keys are errors and are reported with their line number.
Omitted keys take the library defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datasets import (LabeledSet, SyntheticSpec, as_images, gen_two_domain, load_idx,
                       resize_bilinear, subsample)
from .errors import ConfigError
from .kernels import KernelSpec
from .models import ArchSpec
from .pipeline import AdaptConfig

# the synthetic task used by the acceptance trend checks
DEFAULT_ROTATION_DEG = 55.0
DEFAULT_SYNTHETIC_HIDDEN = (16,)
# eval sets are fresh draws of the same generator
EVAL_SEED_OFFSET = 1000

_ADAPT_FIELDS = {f.name: f for f in fields(AdaptConfig) if f.name != "kernel"}

SCHEMA = {
    "data": {"kind", "classes", "dim", "source_radius", "target_radius", "rotation_deg",
             "per_class", "noise", "source_images", "source_labels", "target_images",
             "target_labels", "eval_images", "eval_labels", "source_subsample",
             "target_subsample", "image_size"},
    "model": {"preset", "hidden", "disc_hidden", "image_size"},
    "adapt": set(_ADAPT_FIELDS),
    "kernel": {"family", "sigmas", "epsilon"},
    "ablate": {"disc_variants", "enc_variants", "target_reg", "seeds"},
    "sweep": {"z_values"},
    "output": {"dir"},
}

IDX_KEYS = ("source_images", "source_labels", "target_images", "target_labels")


class ConfigFileError(ConfigError):
    def __init__(self, message: str, path=None, line: int | None = None, key: str | None = None):
        self.path, self.line, self.key = path, line, key
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)


class MissingDatasetError(ConfigFileError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _bools(text: str) -> tuple[bool, ...]:
    return tuple(_bool(t) for t in _words(text))


@dataclass
class ExperimentConfig:
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    arch: ArchSpec = field(default_factory=lambda: ArchSpec(hidden=DEFAULT_SYNTHETIC_HIDDEN))
    data: dict = field(default_factory=lambda: {"kind": "synthetic"})
    ablate: dict = field(default_factory=dict)
    z_values: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0)
    out_dir: Path | None = None
    path: Path | None = None
    # raw data-section seed handling: synthetic draws follow adapt.seed
    lines: dict = field(default_factory=dict, repr=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, adapt=replace(self.adapt, seed=seed))

    def synthetic_spec(self, seed: int | None = None) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(
            K=int(d.get("classes", 3)), dim=int(d.get("dim", 2)),
            source_radius=float(d.get("source_radius", 3.0)),
            target_radius=float(d.get("target_radius", 6.0)),
            rotation_deg=float(d.get("rotation_deg", DEFAULT_ROTATION_DEG)),
            per_class=int(d.get("per_class", 300)), noise=float(d.get("noise", 0.4)),
            seed=self.adapt.seed if seed is None else seed)

    def load_data(self) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
        """(labeled source, target for adaptation, labeled eval set)."""
        if self.data.get("kind", "synthetic") == "synthetic":
            spec = self.synthetic_spec()
            source, target = gen_two_domain(spec)
            _, eval_set = gen_two_domain(replace(spec, seed=spec.seed + EVAL_SEED_OFFSET))
            return source, target, eval_set
        return self._load_idx()

    def _load_idx(self):
        d = self.data
        for key in IDX_KEYS:
            if not d.get(key):
                raise MissingDatasetError(f"[data] {key} is required when kind = idx",
                                          self.path, self.lines.get(("data", key)), key)
        for key in IDX_KEYS:
            if not Path(d[key]).exists():
                raise MissingDatasetError(f"[data] {key}: no such file {d[key]!r}",
                                          self.path, self.lines.get(("data", key)), key)
        size = int(d.get("image_size", self.arch.image_size))

        def prep(ds: LabeledSet, domain: str, n_key: str | None, seed: int) -> LabeledSet:
            if n_key and d.get(n_key):
                ds = subsample(ds, int(d[n_key]), seed)
            x = resize_bilinear(ds.x, size, size) if ds.x.shape[1:] != (size, size) else ds.x
            return as_images(LabeledSet(x, ds.y, domain))

        seed = self.adapt.seed
        source = prep(load_idx(d["source_images"], d["source_labels"], "source"), "source", "source_subsample", seed)
        target = prep(load_idx(d["target_images"], d["target_labels"], "target"), "target", "target_subsample", seed + 1)
        if d.get("eval_images") or d.get("eval_labels"):
            for key in ("eval_images", "eval_labels"):
                if not d.get(key) or not Path(d[key]).exists():
                    raise MissingDatasetError(f"[data] {key} is missing or does not exist",
                                              self.path, self.lines.get(("data", key)), key)
            eval_set = prep(load_idx(d["eval_images"], d["eval_labels"], "target"), "target", None, seed)
        else:
            eval_set = target
        return source, target, eval_set


def _key_lines(text: str) -> dict:
    """Map (section, key) to the 1-based line where the key is defined."""
    out, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out[(section, None)] = no
        elif "=" in line and section is not None:
            out[(section, line.split("=", 1)[0].strip().lower())] = no
    return out


def _convert_adapt(name: str, raw: str):
    if name in ("disc_variant", "enc_variant"):
        return raw.strip().upper()
    if name in ("target_reg", "scaled_dropout"):
        return _bool(raw)
    if name == "corrupt":
        return None if raw.strip().lower() in ("", "auto", "none") else _bool(raw)
    ftype = _ADAPT_FIELDS[name].type
    return int(raw) if "int" in str(ftype) and "float" not in str(ftype) else float(raw)


def parse_config(text: str, path=None) -> ExperimentConfig:
    lines = _key_lines(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigFileError(str(exc).splitlines()[0], path, line) from exc

    def err(msg, section, key=None):
        return ConfigFileError(msg, path, lines.get((section, key)) or lines.get((section, None)), key)

    for section in parser.sections():
        if section not in SCHEMA:
            raise err(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}", section)
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise err(f"unknown key {key!r} in [{section}]", section, key)

    def sec(name):
        return parser[name] if parser.has_section(name) else {}

    cfg = ExperimentConfig(path=Path(path) if path else None, lines=lines)
    try:
        kernel_kw = {}
        k = sec("kernel")
        if "family" in k:
            kernel_kw["family"] = k["family"].strip()
        if "sigmas" in k:
            kernel_kw["sigmas"] = _floats(k["sigmas"])
        if "epsilon" in k:
            kernel_kw["epsilon"] = float(k["epsilon"])
        kernel = KernelSpec(**kernel_kw)
    except (ValueError, ConfigError) as exc:
        raise err(f"[kernel]: {exc}", "kernel") from exc

    adapt_kw = {"kernel": kernel}
    for key, raw in sec("adapt").items():
        try:
            adapt_kw[key] = _convert_adapt(key, raw)
        except ValueError as exc:
            raise err(f"[adapt] {key}: {exc}", "adapt", key) from exc
    try:
        cfg.adapt = AdaptConfig(**adapt_kw)
    except ConfigError as exc:
        raise err(f"[adapt]: {exc}", "adapt") from exc

    data = {"kind": "synthetic", **{k: v.strip() for k, v in sec("data").items()}}
    if data["kind"] not in ("synthetic", "idx"):
        raise err(f"[data] kind must be 'synthetic' or 'idx', got {data['kind']!r}", "data", "kind")
    cfg.data = data

    m = sec("model")
    try:
        preset = m.get("preset", "digits-small" if data["kind"] == "idx" else "mlp-synthetic").strip()
        defaults = ArchSpec.digits_small() if preset == "digits-small" else ArchSpec(hidden=DEFAULT_SYNTHETIC_HIDDEN)
        cfg.arch = ArchSpec(
            preset=preset,
            input_dim=int(data.get("dim", 2)),
            hidden=_ints(m["hidden"]) if "hidden" in m else defaults.hidden,
            disc_hidden=_ints(m["disc_hidden"]) if "disc_hidden" in m else defaults.disc_hidden,
            image_size=int(m.get("image_size", data.get("image_size", 28))))
        if data["kind"] == "synthetic":
            cfg.synthetic_spec()
    except (ValueError, ConfigError) as exc:
        raise err(f"[model]/[data]: {exc}", "model" if parser.has_section("model") else "data") from exc

    a = sec("ablate")
    try:
        cfg.ablate = {
            "disc_variants": tuple(v.upper() for v in _words(a.get("disc_variants", ""))),
            "enc_variants": tuple(v.upper() for v in _words(a.get("enc_variants", ""))),
            "target_reg": _bools(a.get("target_reg", "false")),
            "seeds": _ints(a.get("seeds", "0,1,2")),
        }
    except ValueError as exc:
        raise err(f"[ablate]: {exc}", "ablate") from exc

    s = sec("sweep")
    if "z_values" in s:
        try:
            cfg.z_values = _floats(s["z_values"])
        except ValueError as exc:
            raise err(f"[sweep] z_values: {exc}", "sweep", "z_values") from exc
        bad = [z for z in cfg.z_values if not 0.0 < z <= 1.0]
        if bad:
            raise err(f"[sweep] z_values must lie in (0, 1], got {bad}", "sweep", "z_values")

    if "dir" in sec("output"):
        cfg.out_dir = Path(sec("output")["dir"].strip())
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError("config file not found", path)
    return parse_config(path.read_text(encoding="utf-8"), path)
