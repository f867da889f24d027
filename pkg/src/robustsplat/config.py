"""Flat key-value run configuration.

Config files are plain text, one `section.key = value` per line, `#` starts a
comment. Every key has a documented default below; unknown keys are rejected
rather than ignored so a typo cannot silently fall back to a default.
Precedence: command-line override > config file > default.
"""

from dataclasses import dataclass


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class _Key:
    default: object
    kind: type
    choices: tuple = ()
    help: str = ""


# fmt: off
SCHEMA = {
    # scene synthesis
    "scene.preset":        _Key("medium", str, ("easy", "medium", "hard", "clean", "camouflage"),
                                "distractor difficulty preset; sets occupancy and camouflage"),
    "scene.width":         _Key(96, int, help="image width in pixels"),
    "scene.height":        _Key(96, int, help="image height in pixels"),
    "scene.views":         _Key(60, int, help="number of training views"),
    "scene.occupancy":     _Key(-1.0, float, help="distractor area fraction target; -1 takes the preset value"),
    "scene.persistence":   _Key(10, int, help="consecutive views sharing one distractor layout"),
    "scene.jitter":        _Key(0.05, float, help="per-view brightness gain jitter amplitude"),
    "scene.camouflage":    _Key(False, bool, help="color distractors from the clean palette; -1 occupancy presets may override"),
    "scene.feature_dim":   _Key(8, int, help="channels in the synthetic per-pixel feature maps"),
    "scene.feature_noise": _Key(0.1, float, help="stddev of additive noise on feature maps"),
    "scene.fidelity":      _Key(0.95, float, help="probability the semantic feature channel is correct per pixel"),
    "scene.seed":          _Key(0, int, help="scene generator seed"),

    # masked reconstruction loss
    "loss.kernel":         _Key("none", str, ("none", "l2", "l1", "charbonnier", "geman_mcclure"),
                                "reweight the loss by a robust kernel instead of a mask"),
    "loss.kernel_scale":   _Key(0.1, float, help="kernel scale c for charbonnier / geman_mcclure"),

    # discounted residual histogram
    "hist.bucket_width":   _Key(1e-3, float, help="histogram bucket width"),
    "hist.max_residual":   _Key(2.0, float, help="largest tracked residual; above goes to the overflow slot"),
    "hist.discount":       _Key(0.99, float, help="per-update decay of old counts"),

    # outlier mask pipeline
    "mask.mode":            _Key("none", str, ("none", "trim", "robust_filter", "sls_agg", "sls_mlp"),
                                 "masking strategy"),
    "mask.tau":             _Key(0.5, float, help="inlier quantile for the residual threshold"),
    "mask.box_threshold":   _Key(0.5, float, help="3x3 box vote needed to keep a pixel after smoothing"),
    "mask.patch_size":      _Key(8, int, help="patch tile edge in pixels"),
    "mask.neighborhood":    _Key(16, int, help="neighborhood window edge for patch voting"),
    "mask.patch_threshold": _Key(0.6, float, help="neighborhood inlier fraction that rescues a patch"),
    "mask.use_smooth":      _Key(True, bool, help="apply the 3x3 smoothing stage"),
    "mask.use_patch":       _Key(True, bool, help="apply the patch voting stage"),
    "mask.patch_override":  _Key(False, bool, help="patch stage replaces the mask instead of OR-ing into it"),
    "mask.beta1":           _Key(3e-4, float, help="warm-up schedule strength"),
    "mask.beta2":           _Key(1.5, float, help="warm-up schedule staircase length in steps"),

    # semantic label supervision
    "sls.clusters":        _Key(100, int, help="target cluster count for the per-view segmentation"),
    "sls.lambda":          _Key(0.5, float, help="weight of the classifier smoothness penalty"),
    "sls.pe_degree":       _Key(8, int, help="positional encoding frequency count"),
    "sls.hidden":          _Key("64,64", str, help="classifier hidden widths, comma separated"),
    "sls.mlp_lr":          _Key(1e-3, float, help="classifier optimizer learning rate"),
    "sls.label_warmup":    _Key(500, int, help="steps before classifier label supervision begins"),

    # optimization loop
    "train.steps":           _Key(3000, int, help="optimization steps"),
    "train.eval_every":      _Key(100, int, help="steps between metric rows in log.csv"),
    "train.seed":            _Key(0, int, help="training seed (init and mask sampling)"),
    "train.splats":          _Key(1500, int, help="initial splat count"),
    "train.mask_before_hist": _Key(False, bool, help="threshold against the histogram before adding the current residuals"),
    "train.lr_means":        _Key(2e-3, float, help="learning rate, splat positions"),
    "train.lr_scales":       _Key(5e-3, float, help="learning rate, log scales"),
    "train.lr_rotation":     _Key(5e-3, float, help="learning rate, rotations"),
    "train.lr_opacity":      _Key(5e-2, float, help="learning rate, opacity logits"),
    "train.lr_color":        _Key(2.5e-3, float, help="learning rate, base colors"),
    "train.lr_glo":          _Key(1e-3, float, help="learning rate, appearance latents and mapper"),

    # utilization-based pruning
    "ubp.enabled": _Key(False, bool, help="prune splats with low masked position-gradient utilization"),
    "ubp.start":   _Key(500, int, help="first step of the pruning window"),
    "ubp.stop":    _Key(1500, int, help="last step of the pruning window"),
    "ubp.period":  _Key(100, int, help="steps of accumulation per pruning decision"),
    "ubp.kappa":   _Key(1e-8, float, help="utilization threshold below which a splat is dropped"),

    # per-view appearance model
    "glo.enabled": _Key(True, bool, help="per-view latent + affine color mapper"),
    "glo.dim":     _Key(8, int, help="appearance latent dimension"),
    "glo.hidden":  _Key(32, int, help="mapper hidden width"),
}
# fmt: on


def default_config() -> dict:
    return {key: spec.default for key, spec in SCHEMA.items()}


def coerce(key: str, raw: object) -> object:
    """Validate one value against the schema; raw may be a string or typed."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    spec = SCHEMA[key]
    try:
        if spec.kind is bool:
            value = raw if isinstance(raw, bool) else _bool(str(raw))
        elif spec.kind is int:
            if isinstance(raw, bool):
                raise ValueError
            value = int(str(raw).strip())
        elif spec.kind is float:
            value = float(str(raw).strip())
        else:
            value = str(raw).strip()
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key}: {raw!r} is not {spec.kind.__name__}") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"bad value for {key}: {value!r} not in {spec.choices}")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `section.key = value` lines into a validated override dict."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in overrides:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        overrides[key] = coerce(key, raw)
    return overrides


def load_config(path=None, cli_overrides=None) -> dict:
    """Merge defaults, an optional config file, and CLI overrides, in that order."""
    cfg = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            cfg.update(parse_config_text(f.read(), source=str(path)))
    for key, raw in (cli_overrides or {}).items():
        cfg[key] = coerce(key, raw)
    return cfg


def serialize_config(cfg: dict) -> str:
    """Render a full config back to file syntax, schema order."""
    lines = []
    for key in SCHEMA:
        value = cfg[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def hidden_widths(cfg: dict) -> list:
    try:
        widths = [int(part) for part in str(cfg["sls.hidden"]).split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad value for sls.hidden: {cfg['sls.hidden']!r}") from None
    if not widths or any(w <= 0 for w in widths):
        raise ConfigError(f"bad value for sls.hidden: {cfg['sls.hidden']!r}")
    return widths
