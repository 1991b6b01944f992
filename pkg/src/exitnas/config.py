"""Engine configuration: TOML file, CLI overrides, built-in defaults.

Precedence is CLI override > config file > built-in default. MAC budgets are
written in millions everywhere a human touches them (config file, CLI,
manifests, reports); raw integer MAC counts stay internal to the engine.

The tuner's threshold grid is the search space's threshold grid by
construction, so tuned vectors always stay on the genome alphabet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigError, ContractViolation, ExitNasError, InvalidConfigurationError
from .genome import SearchSpace
from .oracle import SyntheticOracleParams
from .search import SearchConfig
from .surrogate import SurrogateHyper
from .tuner import TunerConfig


@dataclass
class OracleConfig:
    kind: str = "synthetic"                 # "synthetic" or "external"
    n_samples: int = 1500                   # synthetic validation-trace size
    command: str = ""                       # external evaluator argv prefix
    dataset_id: str = "svhn"
    timeout_s: float = 1800.0
    options: dict = field(default_factory=dict)
    synthetic: SyntheticOracleParams = field(default_factory=SyntheticOracleParams)

    def to_dict(self):
        return {
            "kind": self.kind,
            "n_samples": self.n_samples,
            "command": self.command,
            "dataset_id": self.dataset_id,
            "timeout_s": self.timeout_s,
            "options": dict(self.options),
            "synthetic": self.synthetic.to_dict(),
        }


@dataclass
class EngineConfig:
    space: SearchSpace
    search: SearchConfig
    tuner: TunerConfig
    oracle: OracleConfig
    surrogate: SurrogateHyper = field(default_factory=SurrogateHyper)

    def to_dict(self):
        return {
            "space": self.space.to_dict(),
            "search": self.search.to_dict(),
            "surrogate": {
                "hidden": list(self.surrogate.hidden),
                "learning_rate": self.surrogate.learning_rate,
                "epochs": self.surrogate.epochs,
                "batch_limit": self.surrogate.batch_limit,
                "momentum": self.surrogate.momentum,
                "one_hot": self.surrogate.one_hot,
            },
            "tuner": {
                "target_macs": self.tuner.target_macs,
                "gamma": self.tuner.gamma,
                "grid": list(self.tuner.grid),
                "max_grid_evals": self.tuner.max_grid_evals,
            },
            "oracle": self.oracle.to_dict(),
        }


_SEARCH_KEYS = {
    "target_macs": float,
    "beta": float,
    "iterations": int,
    "initial_population": int,
    "per_iteration_evals": int,
    "training_epochs": int,
    "seed": int,
    "offspring_pool": int,
    "mutation_probability": float,
    "objective_mode": str,
    "max_consecutive_failures": int,
}

_TUNER_KEYS = {"gamma": float, "max_grid_evals": int}

_ORACLE_KEYS = {
    "kind": str,
    "n_samples": int,
    "command": str,
    "dataset_id": str,
    "timeout_s": float,
}

_SURROGATE_KEYS = {
    "learning_rate": float,
    "epochs": int,
    "batch_limit": int,
    "momentum": float,
    "one_hot": bool,
}

_SPACE_LIST_KEYS = (
    "depth_options",
    "kernel_options",
    "expansion_options",
    "resolution_options",
    "exit_interp_options",
    "exit_kernel_options",
    "exit_expansion_options",
    "threshold_grid",
    "block_channels",
)


def _coerce(section, key, value, typ, problems):
    try:
        if typ is bool and isinstance(value, bool):
            return value
        if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if typ is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if typ is str and isinstance(value, str):
            return value
        if typ is float:
            raise TypeError
    except TypeError:
        pass
    problems.append(f"[{section}] {key}: expected {typ.__name__}, got {value!r}")
    return None


def _parse_section(doc, section, known, problems):
    raw = doc.get(section, {})
    if not isinstance(raw, dict):
        problems.append(f"[{section}]: expected a table")
        return {}
    out = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"[{section}] {key}: unknown key")
            continue
        coerced = _coerce(section, key, value, known[key], problems)
        if coerced is not None:
            out[key] = coerced
    return out


def load_config(path=None, overrides=None, require_target=True) -> EngineConfig:
    """Build the effective engine config; raises ConfigError with diagnostics.

    ``require_target`` is off for commands that only need the search space
    (profile, sample); a placeholder budget is used internally.
    """
    problems = []
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None

    known_sections = {"search", "tuner", "space", "oracle", "surrogate"}
    for section in doc:
        if section not in known_sections:
            problems.append(f"[{section}]: unknown section")

    search_kw = _parse_section(doc, "search", _SEARCH_KEYS, problems)
    tuner_kw = _parse_section(doc, "tuner", _TUNER_KEYS, problems)
    oracle_kw = _parse_section(doc, "oracle", _ORACLE_KEYS, problems)
    surrogate_raw = doc.get("surrogate", {})
    surrogate_kw = {}
    if not isinstance(surrogate_raw, dict):
        problems.append("[surrogate]: expected a table")
    else:
        for key, value in surrogate_raw.items():
            if key == "hidden":
                if isinstance(value, list) and value and all(
                    isinstance(v, int) and not isinstance(v, bool) for v in value
                ):
                    surrogate_kw["hidden"] = tuple(value)
                else:
                    problems.append("[surrogate] hidden: expected a list of ints")
            elif key in _SURROGATE_KEYS:
                coerced = _coerce("surrogate", key, value, _SURROGATE_KEYS[key], problems)
                if coerced is not None:
                    surrogate_kw[key] = coerced
            else:
                problems.append(f"[surrogate] {key}: unknown key")

    space_raw = doc.get("space", {})
    space_kw = {}
    if not isinstance(space_raw, dict):
        problems.append("[space]: expected a table")
        space_raw = {}
    for key, value in space_raw.items():
        if key in _SPACE_LIST_KEYS:
            if not isinstance(value, list):
                problems.append(f"[space] {key}: expected a list")
            else:
                space_kw[key] = tuple(value)
        elif key in ("stem_channels", "num_classes"):
            coerced = _coerce("space", key, value, int, problems)
            if coerced is not None:
                space_kw[key] = coerced
        else:
            problems.append(f"[space] {key}: unknown key")

    synth_raw = doc.get("oracle", {}).get("synthetic", {}) if isinstance(
        doc.get("oracle", {}), dict) else {}
    oracle_options = doc.get("oracle", {}).get("options", {}) if isinstance(
        doc.get("oracle", {}), dict) else {}

    overrides = overrides or {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _SEARCH_KEYS:
            search_kw[key] = value
        elif key in _TUNER_KEYS:
            tuner_kw[key] = value
        elif key in _ORACLE_KEYS:
            oracle_kw[key] = value
        else:
            problems.append(f"override {key}: unknown key")

    if "target_macs" not in search_kw:
        if require_target:
            problems.append(
                "[search] target_macs: required (millions; e.g. 1, 2 or 17) via "
                "config file or --target-macs"
            )
        else:
            search_kw["target_macs"] = 1.0

    if problems:
        raise ConfigError(problems)

    try:
        space = SearchSpace(**space_kw)
        search = SearchConfig(**search_kw)
        tuner = TunerConfig(
            target_macs=search.target_macs,
            gamma=tuner_kw.get("gamma", 0.1),
            grid=space.threshold_grid,
            max_grid_evals=tuner_kw.get("max_grid_evals", 1_000_000),
        )
        synthetic = (
            SyntheticOracleParams.from_dict(synth_raw) if synth_raw
            else SyntheticOracleParams()
        )
        oracle = OracleConfig(
            kind=oracle_kw.get("kind", "synthetic"),
            n_samples=oracle_kw.get("n_samples", 1500),
            command=oracle_kw.get("command", ""),
            dataset_id=oracle_kw.get("dataset_id", "svhn"),
            timeout_s=oracle_kw.get("timeout_s", 1800.0),
            options=dict(oracle_options),
            synthetic=synthetic,
        )
    except (ContractViolation, InvalidConfigurationError, TypeError, ExitNasError) as exc:
        raise ConfigError([str(exc)]) from exc
    if oracle.kind not in ("synthetic", "external"):
        raise ConfigError([f"[oracle] kind: {oracle.kind!r} not in ('synthetic', 'external')"])
    if oracle.kind == "external" and not oracle.command:
        raise ConfigError(["[oracle] command: required for the external evaluator"])
    try:
        surrogate = SurrogateHyper(**surrogate_kw)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError([f"[surrogate]: {exc}"]) from exc
    return EngineConfig(space=space, search=search, tuner=tuner, oracle=oracle,
                        surrogate=surrogate)


def config_from_dict(d) -> EngineConfig:
    """Rebuild an EngineConfig from a checkpoint's embedded config snapshot."""
    try:
        space = SearchSpace.from_dict(d["space"])
        search = SearchConfig(**d["search"])
        tuner = TunerConfig(
            target_macs=d["tuner"]["target_macs"],
            gamma=d["tuner"]["gamma"],
            grid=tuple(d["tuner"]["grid"]),
            max_grid_evals=d["tuner"]["max_grid_evals"],
        )
        oracle_d = d.get("oracle", {})
        oracle = OracleConfig(
            kind=oracle_d.get("kind", "synthetic"),
            n_samples=oracle_d.get("n_samples", 1500),
            command=oracle_d.get("command", ""),
            dataset_id=oracle_d.get("dataset_id", "svhn"),
            timeout_s=oracle_d.get("timeout_s", 1800.0),
            options=dict(oracle_d.get("options", {})),
            synthetic=SyntheticOracleParams.from_dict(oracle_d.get("synthetic", {}))
            if oracle_d.get("synthetic") else SyntheticOracleParams(),
        )
        hyper_d = d.get("surrogate_hyper", d.get("surrogate"))
        hyper = SurrogateHyper(
            hidden=tuple(hyper_d["hidden"]),
            learning_rate=hyper_d["learning_rate"],
            epochs=hyper_d["epochs"],
            batch_limit=hyper_d["batch_limit"],
            momentum=hyper_d["momentum"],
            one_hot=hyper_d.get("one_hot", False),
        ) if hyper_d else SurrogateHyper()
    except (KeyError, ContractViolation, InvalidConfigurationError, TypeError) as exc:
        raise ConfigError([f"bad config snapshot: {exc}"]) from exc
    return EngineConfig(space=space, search=search, tuner=tuner, oracle=oracle,
                        surrogate=hyper)


def write_manifest(path, config: EngineConfig, *, evaluator_kind, archive_path,
                   checkpoint_path, started_at, finished_at, status):
    manifest = {
        "config": config.to_dict(),
        "seed": config.search.seed,
        "target_macs_millions": config.search.target_macs,
        "evaluator_kind": evaluator_kind,
        "archive_path": str(archive_path),
        "checkpoint_path": str(checkpoint_path),
        "started_at": started_at,
        "finished_at": finished_at,
        "status": status,
    }
    Path(path).write_text(json.dumps(manifest, indent=2))
    return manifest
