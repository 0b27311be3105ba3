"""Run configuration: YAML loading, schema validation, defaults, and object construction.

The schema ships as ``config_schema.json`` next to this module. Validation
collects every problem before reporting, each tagged with its dotted key path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .errors import AssumptionWarning, ConfigError
from .harness import ExperimentConfig
from .hjsolver import HjProblem
from .model import (BumpKernel, ConstantFunction, CosineFunction, GaussianKernel, ModelSpec,
                    RateFunctions, ScalingParams, TabulatedFunction, TabulatedKernel, TentFunction,
                    TorusFunction, delta_rule)
from .process import InitRule, LeapControl

__all__ = ["RunConfig", "load_schema", "parse_and_validate", "emit", "fill_defaults"]


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config_schema.json").read_text())


def _resolve(node: dict, root: dict) -> dict:
    while "$ref" in node:
        ref = node["$ref"]
        target = root
        for part in ref.lstrip("#/").split("/"):
            target = target[part]
        extra = {k: v for k, v in node.items() if k != "$ref"}
        node = {**target, **extra}
    return node


def fill_defaults(instance: Any, schema: dict, root: dict | None = None) -> Any:
    """Insert ``default`` values for absent keys, recursing into objects and matching ``oneOf`` branches."""
    root = root or schema
    schema = _resolve(schema, root)
    if not isinstance(instance, dict):
        return instance
    if "oneOf" in schema:
        for branch in schema["oneOf"]:
            branch = _resolve(branch, root)
            if jsonschema.Draft202012Validator(branch).is_valid(instance):
                fill_defaults(instance, branch, root)
                break
    for key, sub in schema.get("properties", {}).items():
        sub_r = _resolve(sub, root)
        if key not in instance and "default" in sub_r:
            instance[key] = copy.deepcopy(sub_r["default"])
        if key in instance:
            fill_defaults(instance[key], sub_r, root)
    return instance


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def _validate(data: dict, schema: dict) -> list[tuple[str, str]]:
    v = jsonschema.Draft202012Validator(schema)
    errs = []
    for e in sorted(v.iter_errors(data), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        if e.validator == "oneOf" and e.context:
            # report the closest branch rather than the generic oneOf message
            best = min(e.context, key=lambda c: (len(list(c.schema_path)), c.message))
            errs.append((_path(e), f"no variant matches ({best.message})"))
        else:
            errs.append((_path(e), e.message))
    return errs


def _torus_function(node: dict, base: Path, key: str) -> TorusFunction:
    if "preset" in node:
        kind = node["preset"]
        if kind == "constant":
            return ConstantFunction(float(node["value"]))
        if kind == "cosine":
            return CosineFunction(float(node["mean"]), float(node["amplitude"]), float(node.get("phase", 0.0)),
                                  int(node.get("frequency", 1)))
        if kind == "tent":
            return TentFunction(float(node["base"]), float(node["height"]), float(node.get("center", 0.5)),
                                float(node.get("half_width", 0.25)))
        raise ConfigError("", [(key, f"unknown preset {kind!r}")])
    if "values" in node:
        return TabulatedFunction(node["values"], node.get("lip"))
    path = Path(node["table"])
    if not path.is_absolute():
        path = base / path
    try:
        return TabulatedFunction.from_file(path, node.get("lip"))
    except OSError as exc:
        raise ConfigError("", [(key + ".table", f"cannot read {path}: {exc}")]) from exc


@dataclass
class RunConfig:
    """Validated configuration with defaults filled; ``data`` mirrors the YAML layout."""

    data: dict
    base_dir: Path

    # -- accessors

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def verbosity(self) -> str:
        return self.data["verbosity"]

    @property
    def strict(self) -> bool:
        return bool(self.data["model"]["strict"])

    def rates(self) -> RateFunctions:
        r = self.data["model"]["rates"]
        return RateFunctions(*(_torus_function(r[k], self.base_dir, f"model.rates.{k}") for k in "bdp"))

    def kernel(self):
        k = self.data["model"]["kernel"]
        if k["type"] == "gaussian":
            return GaussianKernel(float(k["sigma"]))
        if k["type"] == "bump":
            return BumpKernel(float(k["radius"]))
        path = Path(k["path"])
        if not path.is_absolute():
            path = self.base_dir / path
        try:
            import numpy as np

            tab = np.loadtxt(path, ndmin=2)
        except OSError as exc:
            raise ConfigError("", [("model.kernel.path", f"cannot read {path}: {exc}")]) from exc
        return TabulatedKernel(tab[:, 0], tab[:, 1], float(k["tail_radius"]), bool(k["normalize"]), str(path))

    def beta0(self) -> TorusFunction:
        return _torus_function(self.data["initial"]["profile"], self.base_dir, "initial.profile")

    def scaling(self, K: float | None = None, m: int | None = None) -> ScalingParams:
        s = self.data["model"]["scaling"]
        return ScalingParams(K=float(s["K"] if K is None else K), m=int(s["m"] if m is None else m),
                             a1=float(s["a1"]), a=float(s["a"]), a2=float(s["a2"]), L=float(s["L"]))

    def model_spec(self, K: float | None = None, m: int | None = None, quiet: bool = False) -> ModelSpec:
        with warnings.catch_warnings():
            if quiet:
                warnings.simplefilter("ignore", AssumptionWarning)
            return ModelSpec(self.kernel(), self.rates(), self.scaling(K, m), self.strict)

    def init_rule(self) -> InitRule:
        i = self.data["initial"]
        if i["rule"] == "profile":
            return InitRule("profile", profile=self.beta0())
        if i["rule"] == "uniform":
            return InitRule("uniform", count=i.get("count"))
        return InitRule("explicit", counts=tuple(i.get("counts", ())))

    def leap_control(self) -> LeapControl:
        p = self.data["process"]
        return LeapControl(epsilon=p["leap_epsilon"], critical_count=p["leap_critical_count"])

    def hj_problem(self) -> HjProblem:
        return HjProblem(self.rates(), self.kernel())

    def experiment(self) -> ExperimentConfig:
        h = self.data["harness"]
        s = self.data["model"]["scaling"]
        Ks = tuple(float(k) for k in h["K_ladder"])
        ms = tuple(h["m_ladder"]) if h["m_ladder"] else tuple(
            delta_rule(K, h["delta_rule"]["c"], h["delta_rule"]["exponent"]) for K in Ks)
        return ExperimentConfig(
            rates=self.rates(), kernel=self.kernel(), beta0=self.beta0(), K_ladder=Ks, m_ladder=ms,
            a=float(s["a"]), a1=float(s["a1"]), a2=float(s["a2"]), L=float(s["L"]),
            replicates=int(h["replicates"]), T=float(h["T"]),
            comparison_times=tuple(float(t) for t in (h["comparison_times"] or [h["T"]])),
            observe_points=int(h["observe_points"]), hj_n=int(h["hj_n"]),
            hj_L_grad=self.data["hjsolver"]["L_grad"], hj_cfl=float(self.data["hjsolver"]["cfl"]),
            seed=self.seed, strict=self.strict, track_ledger=bool(h["ledger"]),
            bound_constant=h["bound_constant"], lipschitz_A=float(h["lipschitz_A"]),
            max_events=int(self.data["process"]["max_events"]), jobs=int(h["jobs"]))

    def digest(self) -> str:
        return hashlib.sha256(emit(self).encode()).hexdigest()


def _semantic_checks(data: dict, base: Path) -> list[tuple[str, str]]:
    errs = []
    model = data.get("model", {})
    s = model.get("scaling", {})
    if "delta_K" in s:
        inv = 1.0 / s["delta_K"]
        m = round(inv)
        if abs(inv - m) > 1e-9 * inv:
            errs.append(("model.scaling.m", f"1/delta_K = {inv!r} is not an integer; give scaling.m directly"))
        elif "m" in s and s["m"] != m:
            errs.append(("model.scaling.m", f"m = {s['m']} disagrees with 1/delta_K = {m}"))
        else:
            s["m"] = int(m)
        del s["delta_K"]
    if "m" not in s and "K" in s and isinstance(s["K"], (int, float)) and s["K"] > 1:
        rule = data.get("harness", {}).get("delta_rule", {})
        s["m"] = delta_rule(float(s["K"]), rule.get("c", 2.5), rule.get("exponent", 1.5))
    h = data.get("harness", {})
    T = h.get("T", 0.5)
    for t in h.get("comparison_times", []):
        if t > T:
            errs.append(("harness.comparison_times", f"{t} exceeds harness.T = {T}"))
    if h.get("m_ladder") and len(h["m_ladder"]) != len(h.get("K_ladder", [])):
        errs.append(("harness.m_ladder", "needs one entry per K_ladder value"))
    p = data.get("process", {})
    for t in p.get("snapshot_times", []):
        if t > p.get("T", 0.5):
            errs.append(("process.snapshot_times", f"{t} exceeds process.T = {p.get('T')}"))
    hj = data.get("hjsolver", {})
    for t in hj.get("snapshots", []):
        if t > hj.get("T", 0.5):
            errs.append(("hjsolver.snapshots", f"{t} exceeds hjsolver.T = {hj.get('T')}"))
    init = data.get("initial", {})
    if init.get("rule") == "explicit":
        cnt = init.get("counts")
        if not cnt:
            errs.append(("initial.counts", "required for the explicit rule"))
        elif "m" in s and len(cnt) != s["m"]:
            errs.append(("initial.counts", f"length {len(cnt)} differs from m = {s['m']}"))
    # make table paths absolute so emitted configs are location independent
    for key in ("b", "d", "p"):
        node = model.get("rates", {}).get(key)
        if isinstance(node, dict) and "table" in node:
            node["table"] = str((base / node["table"]).resolve())
    prof = init.get("profile")
    if isinstance(prof, dict) and "table" in prof:
        prof["table"] = str((base / prof["table"]).resolve())
    ker = model.get("kernel")
    if isinstance(ker, dict) and "path" in ker:
        ker["path"] = str((base / ker["path"]).resolve())
    return errs


def parse_and_validate(source, base_dir=None) -> RunConfig:
    """Parse a YAML file path (or an already-loaded mapping) into a :class:`RunConfig`.

    Raises :class:`ConfigError` listing every problem found.
    """
    if isinstance(source, dict):
        data = copy.deepcopy(source)
        base = Path(base_dir or ".").resolve()
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", [("<file>", str(exc))]) from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}", [("<file>", str(exc))]) from exc
        base = Path(base_dir) if base_dir else path.resolve().parent
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", [("<root>", "expected a mapping at top level")])
    schema = load_schema()
    errs = _validate(data, schema)
    if not errs:
        fill_defaults(data, schema)
        errs = _semantic_checks(data, base)
        errs += _validate(data, schema)
    if errs:
        raise ConfigError("", errs)
    cfg = RunConfig(data, base)
    # construct the objects once so value-level problems surface now
    build_errors = []
    for what, fn in (("model.rates", cfg.rates), ("model.kernel", cfg.kernel), ("initial.profile", cfg.beta0),
                     ("model.scaling", cfg.scaling)):
        try:
            fn()
        except ConfigError as exc:
            build_errors += exc.errors or [(what, str(exc))]
    if build_errors:
        raise ConfigError("", build_errors)
    return cfg


def emit(cfg: RunConfig) -> str:
    """Canonical YAML text; ``parse_and_validate(emit(c))`` reproduces ``c``."""
    return yaml.safe_dump(cfg.data, sort_keys=True, default_flow_style=None)
