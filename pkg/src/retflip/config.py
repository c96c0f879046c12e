"""Scan configuration files: ``key = value`` lines with includes."""

from dataclasses import dataclass, field
from pathlib import Path

from .faultsim import DIRECT_JUMP, MODES, parse_rule, standard_rules
from .timing import PRESETS, StopModel
from .vm import DEFAULT_BUDGET

CANDIDATE_MODES = ("matched", "exhaustive_offset")
SCALAR_KEYS = {
    "program", "correct_input", "incorrect_input", "candidate_mode", "d", "low_bits_only",
    "step2", "budget", "degradation", "seed", "workers", "mode", "stop_model",
}
LIST_KEYS = {"rule"}
TRUE = {"1", "true", "on", "yes"}
FALSE = {"0", "false", "off", "no"}


class ConfigError(ValueError):
    pass


@dataclass
class ScanConfig:
    program: Path
    correct_input: Path
    incorrect_input: Path
    candidate_mode: str = "matched"
    d: int = 1
    low_bits_only: bool = False
    step2: bool = True
    rules: list = field(default_factory=list)  # exploit rules; crash/hang are appended
    budget: int = DEFAULT_BUDGET
    degradation: int = 1
    seed: int = 0
    workers: int = 1
    mode: str = DIRECT_JUMP
    stop_model: str = "bash-like"

    def validate(self):
        for key in ("program", "correct_input", "incorrect_input"):
            path = getattr(self, key)
            if not Path(path).is_file():
                raise ConfigError(f"{key}: no such file {path}")
        if self.candidate_mode not in CANDIDATE_MODES:
            raise ConfigError(f"candidate_mode must be one of {', '.join(CANDIDATE_MODES)}")
        if self.d not in (1, 2, 3):
            raise ConfigError("d must be 1, 2 or 3")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if self.degradation < 1:
            raise ConfigError("degradation must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        stop_model_of(self.stop_model)
        return self

    def classification_rules(self):
        return standard_rules(self.rules)

    def echo(self):
        """Flat, JSON-friendly view of the settings that affect results.

        ``workers`` is left out: it changes speed, not output.
        """
        return {
            "program": str(self.program),
            "correct_input": str(self.correct_input),
            "incorrect_input": str(self.incorrect_input),
            "candidate_mode": self.candidate_mode,
            "d": self.d,
            "low_bits_only": self.low_bits_only,
            "step2": self.step2,
            "rules": [str(r) for r in self.rules],
            "budget": self.budget,
            "degradation": self.degradation,
            "seed": self.seed,
            "mode": self.mode,
            "stop_model": self.stop_model,
        }


def stop_model_of(text):
    """A preset name or ``mean,stddev``."""
    if text in PRESETS:
        return PRESETS[text]
    try:
        mean, sd = (float(x) for x in text.split(","))
        return StopModel(mean, sd)
    except ValueError:
        raise ConfigError(f"stop_model must be a preset ({', '.join(PRESETS)}) "
                          f"or 'mean,stddev', got {text!r}") from None


def parse_bool(text, key="value"):
    t = str(text).strip().lower()
    if t in TRUE:
        return True
    if t in FALSE:
        return False
    raise ConfigError(f"{key}: expected on/off, got {text!r}")


def read_entries(path, _seen=None):
    """Ordered (key, value, base_dir) entries, includes expanded in place."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    seen = seen | {path}
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path.name}:{lineno}: expected 'key = value'")
        if key == "include":
            out += read_entries(path.parent / value, seen)
        elif key in SCALAR_KEYS or key in LIST_KEYS:
            out.append((key, value, path.parent))
        else:
            raise ConfigError(f"{path.name}:{lineno}: unknown key {key!r}")
    return out


def _int(key, value):
    try:
        return int(value, 0)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def load_config(path, overrides=None):
    """Build a validated ScanConfig; later entries and ``overrides`` win."""
    values = {}
    rules = []
    for key, value, base in read_entries(path):
        if key == "rule":
            try:
                rules.append(parse_rule("rule " + value))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        elif key in ("program", "correct_input", "incorrect_input"):
            values[key] = base / value
        else:
            values[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    missing = [k for k in ("program", "correct_input", "incorrect_input") if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    cfg = ScanConfig(Path(values["program"]), Path(values["correct_input"]),
                     Path(values["incorrect_input"]), rules=rules)
    for key in ("d", "budget", "degradation", "seed", "workers"):
        if key in values:
            v = values[key]
            setattr(cfg, key, v if isinstance(v, int) else _int(key, v))
    for key in ("low_bits_only", "step2"):
        if key in values:
            v = values[key]
            setattr(cfg, key, v if isinstance(v, bool) else parse_bool(v, key))
    for key in ("candidate_mode", "mode", "stop_model"):
        if key in values:
            setattr(cfg, key, str(values[key]))
    return cfg.validate()
