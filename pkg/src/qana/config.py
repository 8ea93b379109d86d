"""Run configuration: plain-text key=value files with per-command schemas.

A config file is lines of `key = value`; blank lines and `#` comments are
skipped. Every command declares its keys up front, so unknown or misspelled
keys fail loudly instead of being ignored. CLI flags override file values,
and the resolved config can be rendered back to text for echoing into the
output directory.
"""

from pathlib import Path

from .errors import ConfigError

_REQUIRED = object()


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    return tuple(int(part) for part in s.split(",") if part.strip())


class _Key:
    def __init__(self, conv, default, help_text):
        self.conv = conv
        self.default = default
        self.help = help_text

    def convert(self, raw):
        if not isinstance(raw, str):
            return raw
        return self.conv(raw)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


SCHEMAS = {
    "synth": {
        "out": _Key(str, _REQUIRED, "dataset directory to create"),
        "n_majority": _Key(int, 120, "sample count for the largest class"),
        "imbalance": _Key(float, 5.0, "majority:minority count ratio"),
        "num_classes": _Key(int, 7, "number of pattern classes"),
        "size_min": _Key(int, 72, "smallest raw image side"),
        "size_max": _Key(int, 112, "largest raw image side"),
    },
    "preprocess": {
        "data": _Key(str, _REQUIRED, "raw dataset directory (images/, labels.csv, splits.txt)"),
        "out": _Key(str, _REQUIRED, "output directory for the processed bundle"),
        "smote": _Key(_bool, True, "oversample minority classes in the train split"),
        "smote_k": _Key(int, 5, "neighbourhood size for oversampling"),
        "smote_single_lambda": _Key(_bool, False, "one mixing factor per sample instead of per pixel"),
        "num_classes": _Key(int, 7, "number of classes in labels.csv"),
    },
    "train": {
        "data": _Key(str, _REQUIRED, "processed bundle (.npz) from preprocess"),
        "out": _Key(str, _REQUIRED, "output directory for model + report"),
        "epochs": _Key(int, 10, "optimization epochs"),
        "batch_size": _Key(int, 32, "minibatch size"),
        "learning_rate": _Key(float, 1e-3, "Adam step size"),
        "augment": _Key(_bool, True, "random photometric augmentation each epoch"),
        "block_channels": _Key(_int_list, (32, 64, 128, 256), "output width per block"),
        "head_channels": _Key(int, 256, "width of the spike head"),
        "se_reduction": _Key(int, 16, "squeeze-gate bottleneck divisor"),
        "ghost_ratio": _Key(float, 0.5, "fraction of channels computed by the base branch"),
        "dropout": _Key(float, 0.2, "block dropout rate"),
        "num_classes": _Key(int, 7, "classifier width"),
        "finetune_model": _Key(str, "", "existing model file; update only its classifier"),
    },
    "eval": {
        "model": _Key(str, _REQUIRED, "trained model file"),
        "data": _Key(str, _REQUIRED, "processed bundle (.npz)"),
        "out": _Key(str, _REQUIRED, "output directory for the metrics table"),
        "split": _Key(str, "test", "which split to score"),
        "batch_size": _Key(int, 64, "batch size for the forward pass"),
    },
    "convert": {
        "model": _Key(str, _REQUIRED, "trained model file"),
        "data": _Key(str, _REQUIRED, "processed bundle for range calibration"),
        "out": _Key(str, _REQUIRED, "output directory for the spiking network"),
        "split": _Key(str, "train", "split that feeds range calibration"),
        "calib_samples": _Key(int, 256, "max calibration images"),
        "percentile": _Key(float, 99.9, "activation percentile defining stream ranges"),
    },
    "verify": {
        "model": _Key(str, _REQUIRED, "trained model file"),
        "snn": _Key(str, _REQUIRED, "converted spiking network file"),
        "data": _Key(str, _REQUIRED, "processed bundle for probe images"),
        "out": _Key(str, _REQUIRED, "output directory for the verification report"),
        "split": _Key(str, "test", "split probes are drawn from"),
        "samples": _Key(int, 64, "probe count"),
        "T": _Key(_int_list, (16, 64, 256), "simulation window lengths to sweep"),
    },
    "calibrate": {
        "snn": _Key(str, _REQUIRED, "converted spiking network file"),
        "data": _Key(str, _REQUIRED, "processed bundle with labelled samples"),
        "out": _Key(str, _REQUIRED, "output directory for thresholds"),
        "split": _Key(str, "train", "split used to fit per-class thresholds"),
        "T": _Key(int, 64, "simulation window length"),
        "samples": _Key(int, 0, "cap on calibration samples (0: all)"),
    },
    "infer": {
        "snn": _Key(str, _REQUIRED, "converted spiking network file"),
        "image": _Key(str, _REQUIRED, "input image (.png or .raw)"),
        "out": _Key(str, _REQUIRED, "output directory for the prediction record"),
        "T": _Key(int, 64, "simulation window length"),
        "alpha": _Key(float, 1.0, "softmax sharpness for decoded probabilities"),
        "beta": _Key(float, 0.0, "late-spike emphasis (0: uniform)"),
        "thresholds": _Key(str, "", "thresholds file from calibrate (optional)"),
        "trace": _Key(_bool, False, "write a per-event trace CSV"),
    },
}

COMMANDS = tuple(SCHEMAS)


def parse_kv(text, where="config"):
    """Raw key=value lines -> string dict. Duplicate keys are an error."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{where} line {lineno}: expected key = value, "
                              f"got {body!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{where} line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file missing: {path}")
    return parse_kv(path.read_text(), where=str(path))


def resolve(command, file_kv=None, overrides=None):
    """Merge file values and overrides against the command's schema."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}; expected one of "
                          f"{', '.join(COMMANDS)}")
    schema = SCHEMAS[command]
    merged = dict(file_kv or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    cfg = {}
    for key, value in merged.items():
        if key not in schema:
            raise ConfigError(f"{command}: unknown config key {key!r}")
        try:
            cfg[key] = schema[key].convert(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{command}: bad value for {key!r}: {exc}") from exc
    for key, spec in schema.items():
        if key in cfg:
            continue
        if spec.default is _REQUIRED:
            raise ConfigError(f"{command}: missing required key {key!r}")
        cfg[key] = spec.default
    return cfg


def effective_text(command, cfg, seed):
    """Render a resolved config back to a parseable key=value document."""
    lines = [f"# effective configuration for: {command}", f"# seed = {seed}"]
    for key in sorted(cfg):
        lines.append(f"{key} = {_fmt(cfg[key])}")
    return "\n".join(lines) + "\n"


def describe(command):
    """Key reference for --help style output."""
    schema = SCHEMAS[command]
    lines = []
    for key, spec in schema.items():
        default = "(required)" if spec.default is _REQUIRED else \
            f"[{_fmt(spec.default)}]"
        lines.append(f"  {key:20s} {default:18s} {spec.help}")
    return "\n".join(lines)
