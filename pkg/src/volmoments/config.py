"""Run configuration: JSON schema, defaults and translation into model/contract objects."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .lattice import BetaCurve, GridSpec, ModelConfig, Outlook, RateCurve, VolRegime
from .model import MarkovModel, build_explicit_model, build_lattice_model, interval_boundaries
from .moments import KINDS, Corridor
from .pricers import CONTRACT_KINDS, FIT_FAMILIES, ContractSpec, PricingOptions


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_num_or_null = {"type": ["number", "null"]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


def _pair(item):
    return {"type": "array", "items": item, "minItems": 2, "maxItems": 2}


CORRIDOR_SCHEMA = _obj({"lo": _num_or_null, "hi": _num_or_null, "relative": {"type": "boolean"}})

CONTRACT_SCHEMA = _obj({
    "kind": {"enum": list(CONTRACT_KINDS)},
    "name": {"type": "string"},
    "T": _nonneg,
    "t": _pos,
    "maturities": {"oneOf": [
        {"type": "array", "items": _pos, "minItems": 1},
        _obj({"start": _pos, "stop": _pos, "step": _pos}, required=("start", "stop", "step")),
    ]},
    "capFactor": {"type": ["number", "null"], "exclusiveMinimum": 1},
    "cap": {"type": ["number", "null"], "minimum": 0},
    "corridor": CORRIDOR_SCHEMA,
    "strike": {"type": ["number", "null"], "minimum": 0},
    "barrier": {"type": ["number", "null"], "minimum": 0},
    "fitFamily": {"enum": list(FIT_FAMILIES)},
}, required=("kind",))

SCHEMA = _obj({
    "model": _obj({
        "lattice": _obj({
            "nx": {"type": "integer", "minimum": 3},
            "spot": _pos,
            "lo": _pos,
            "hi": _pos,
            "beta": _obj({"prices": {"type": "array", "items": _pos, "minItems": 1},
                          "values": {"type": "array", "items": _nonneg, "minItems": 1}}),
        }),
        "regimes": _obj({
            "vols": {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3},
            "switchRates": _obj({k: _nonneg for k in ("lowMedium", "mediumLow", "mediumHigh", "highMedium")}),
            "outlookSwitchRates": _pair(_nonneg),
            "initialOutlook": {"enum": ["stable", "negative"]},
            "initialVol": {"enum": ["low", "medium", "high"]},
        }),
        "jumps": _obj({
            "negativeSize": _nonneg,
            "stableSize": _nonneg,
            "intensity": _nonneg,
            "outlookSwitch": _pair(_prob),
        }),
        "vg": _obj({"varianceRate": _nonneg, "smallJumpTruncation": {"type": ["number", "null"], "minimum": 0}}),
        "explicit": _obj({
            "generator": {"type": "array", "items": {"type": "array", "items": _num}, "minItems": 1},
            "prices": {"type": "array", "items": _pos, "minItems": 1},
            "initialState": {"type": "integer", "minimum": 0},
        }, required=("generator", "prices")),
    }),
    "rates": _obj({"breakpoints": {"type": "array", "items": _nonneg, "minItems": 2},
                   "rates": {"type": "array", "items": _num, "minItems": 1}}),
    "contracts": {"type": "array", "items": CONTRACT_SCHEMA},
    "moments": _obj({
        "kind": {"enum": list(KINDS)},
        "corridor": CORRIDOR_SCHEMA,
        "constant": _num,
        "T": _nonneg,
        "t": _pos,
        "order": {"enum": [1, 2, 3]},
    }),
    "engine": _obj({
        "epsBase": _pos,
        "method": {"enum": ["fd", "exact"]},
        "tol": _pos,
        "step": _pos,
        "horizon": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "transitionFloor": _nonneg,
        "occupationFloor": _nonneg,
        "validation": _obj({"negativity": _nonneg, "rowSum": _nonneg, "drift": _nonneg}),
        "fitFamily": {"enum": list(FIT_FAMILIES)},
        "paths": {"type": "integer", "minimum": 1000},
        "seed": {"type": "integer", "minimum": 0},
        "literalRvMax": {"type": "boolean"},
        "indicator": {"enum": ["source", "destination"]},
        "gammaWeight": {"enum": ["ratio", "unit"]},
        "spotWeight": {"type": "boolean"},
        "rootFinder": {"type": "boolean"},
        "mcRv": {"enum": ["compensator", "discrete"]},
    }),
})

DEFAULTS = {
    "model": {
        "lattice": {"nx": 70, "spot": 100.0, "lo": 10.0, "hi": 1000.0,
                    "beta": {"prices": [1.0], "values": [1.0]}},
        "regimes": {"vols": [0.12, 0.20, 0.32],
                    "switchRates": {"lowMedium": 2.0, "mediumLow": 1.0, "mediumHigh": 0.5, "highMedium": 2.0},
                    "outlookSwitchRates": [0.0, 0.0], "initialOutlook": "stable", "initialVol": "medium"},
        "jumps": {"negativeSize": 0.12, "stableSize": 0.02, "intensity": 1.0, "outlookSwitch": [0.2, 0.3]},
        "vg": {"varianceRate": 0.04, "smallJumpTruncation": None},
    },
    "rates": {"breakpoints": [0.0, 50.0], "rates": [0.03]},
    "contracts": [],
    "moments": {"kind": "variance", "corridor": {"lo": None, "hi": None, "relative": False}, "constant": 0.0,
                "T": 0.0, "t": 1.0, "order": 3},
    "engine": {"epsBase": 2e-3, "method": "fd", "tol": 1e-10, "step": 0.25, "horizon": None,
               "transitionFloor": 1e-12, "occupationFloor": 1e-6,
               "validation": {"negativity": 0.0, "rowSum": 1e-12, "drift": 1e-6},
               "fitFamily": "chiSquare", "paths": 100_000, "seed": 0, "literalRvMax": False,
               "indicator": "source", "gammaWeight": "ratio", "spotWeight": False, "rootFinder": False,
               "mcRv": "compensator"},
}

CONTRACT_DEFAULTS = {"name": "", "T": 0.0, "capFactor": 6.2, "cap": None,
                     "corridor": {"lo": None, "hi": None, "relative": False},
                     "strike": None, "barrier": None}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _json_path(path) -> str:
    s = "$"
    for p in path:
        s += f"[{p}]" if isinstance(p, int) else f".{p}"
    return s


def _schema_check(doc) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc),
                    key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        e = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_json_path(e.absolute_path)}: {e.message}")


def _maturities(c: dict) -> list:
    m = c.get("maturities")
    if m is None:
        return [c["t"]] if "t" in c else []
    if isinstance(m, list):
        return [float(x) for x in m]
    n = int(math.floor((m["stop"] - m["start"]) / m["step"] + 1e-9))
    return [round(m["start"] + i * m["step"], 12) for i in range(n + 1)]


@dataclass
class RunConfig:
    """A fully resolved configuration document plus accessors for the built objects."""

    document: dict

    @property
    def engine(self) -> dict:
        return self.document["engine"]

    @property
    def model_section(self) -> dict:
        return self.document["model"]

    def to_json(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True)

    def rate_curve(self) -> RateCurve:
        r = self.document["rates"]
        return RateCurve(tuple(float(b) for b in r["breakpoints"]), tuple(float(x) for x in r["rates"]))

    def model_config(self) -> ModelConfig:
        m = self.model_section
        sw = m["regimes"]["switchRates"]
        return ModelConfig(
            neg_jump_size=m["jumps"]["negativeSize"], stable_jump_size=m["jumps"]["stableSize"],
            jump_intensity=m["jumps"]["intensity"], vg_variance_rate=m["vg"]["varianceRate"],
            regime_vols=tuple(m["regimes"]["vols"]),
            regime_switch_rates=(sw["lowMedium"], sw["mediumLow"], sw["mediumHigh"], sw["highMedium"]),
            jump_outlook_switch=tuple(m["jumps"]["outlookSwitch"]),
            outlook_switch_rates=tuple(m["regimes"]["outlookSwitchRates"]),
            small_jump_truncation=m["vg"]["smallJumpTruncation"])

    def horizon(self) -> float:
        h = self.engine["horizon"]
        ends = [c["t"] for c in self.document["contracts"]] + [self.document["moments"]["t"]]
        need = max(ends)
        if h is not None:
            return float(h)
        step = self.engine["step"]
        return round(math.ceil(need / step - 1e-9) * step, 12)

    def build_model(self) -> MarkovModel:
        m = self.model_section
        e = self.engine
        rates = self.rate_curve()
        if "explicit" in m:
            ex = m["explicit"]
            return build_explicit_model(ex["generator"], ex["prices"], ex.get("initialState", 0), rates,
                                        horizon=self.horizon(), step=e["step"], tol=e["tol"])
        lat = m["lattice"]
        return build_lattice_model(
            self.model_config(), nx=lat["nx"], spot=lat["spot"], grid_spec=GridSpec(lat["lo"], lat["hi"]),
            beta=BetaCurve(tuple(lat["beta"]["prices"]), tuple(lat["beta"]["values"])), rates=rates,
            horizon=self.horizon(), step=e["step"],
            initial_outlook=Outlook[m["regimes"]["initialOutlook"].upper()],
            initial_vol=VolRegime[m["regimes"]["initialVol"].upper()], tol=e["tol"])

    def options(self) -> PricingOptions:
        e = self.engine
        return PricingOptions(eps_base=e["epsBase"], method=e["method"], literal_rv_max=e["literalRvMax"],
                              indicator=e["indicator"], gamma_weight=e["gammaWeight"],
                              spot_weight=e["spotWeight"], root_finder=e["rootFinder"],
                              transition_floor=e["transitionFloor"], occupation_floor=e["occupationFloor"])

    def validation_tolerances(self) -> tuple:
        v = self.engine["validation"]
        return (v["negativity"], v["rowSum"], v["drift"])

    @staticmethod
    def corridor(section: dict, spot: float):
        if section is None or (section["lo"] is None and section["hi"] is None):
            return None
        k = spot if section.get("relative") else 1.0
        lo = None if section["lo"] is None else section["lo"] * k
        hi = None if section["hi"] is None else section["hi"] * k
        return Corridor(lo, hi)

    def contracts(self, model: MarkovModel) -> list:
        out = []
        for c in self.document["contracts"]:
            corr = self.corridor(c["corridor"], model.S0)
            if c["kind"] == "corridorVarianceSwap" and corr is None:
                corr = Corridor()
            if c["kind"] == "conditionalVarianceSwap" and corr is None:
                corr = Corridor()
            barrier = math.inf if c["barrier"] is None else c["barrier"]
            out.append(ContractSpec(c["kind"], c["T"], c["t"], cap_factor=c["capFactor"], cap=c["cap"],
                                    corridor=corr, strike=c["strike"], barrier=barrier,
                                    fit_family=c["fitFamily"], name=c["name"]))
        return out


def parse_config(document) -> RunConfig:
    """Validate ``document`` (dict or JSON text), apply defaults, expand maturity grids."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e}") from None
    if not isinstance(document, dict):
        raise ConfigError("$: configuration must be a JSON object")
    _schema_check(document)
    model_in = document.get("model", {})
    if "explicit" in model_in and set(model_in) - {"explicit"}:
        raise ConfigError("$.model: 'explicit' cannot be combined with lattice sections")
    base = copy.deepcopy(DEFAULTS)
    if "explicit" in model_in:
        base["model"] = {}
        # explicit chains default to zero rates so the generator needs no drift calibration
        base["rates"] = {"breakpoints": [0.0, 50.0], "rates": [0.0]}
    resolved = _merge({k: v for k, v in base.items() if k != "contracts"},
                      {k: v for k, v in document.items() if k != "contracts"})
    if "explicit" in resolved["model"]:
        resolved["model"]["explicit"].setdefault("initialState", 0)
    contracts = []
    for i, c in enumerate(document.get("contracts", [])):
        full = _merge(CONTRACT_DEFAULTS, {k: v for k, v in c.items() if k != "maturities"})
        full.setdefault("fitFamily", resolved["engine"]["fitFamily"])
        if not full["name"]:
            full["name"] = f"{c['kind']}-{i}"
        ts = _maturities(c)
        if not ts:
            raise ConfigError(f"$.contracts[{i}]: needs 't' or 'maturities'")
        if "t" in c and "maturities" in c:
            raise ConfigError(f"$.contracts[{i}]: give either 't' or 'maturities', not both")
        for t in ts:
            if not full["T"] < t:
                raise ConfigError(f"$.contracts[{i}]: issuance T={full['T']} must precede maturity t={t}")
            cc = dict(full, t=t)
            cc["corridor"] = dict(full["corridor"])
            lo, hi = cc["corridor"]["lo"], cc["corridor"]["hi"]
            if lo is not None and hi is not None and lo >= hi:
                raise ConfigError(f"$.contracts[{i}].corridor: lo={lo} must be below hi={hi}")
            if c["kind"] == "rvOption" and cc["strike"] is None:
                raise ConfigError(f"$.contracts[{i}]: rvOption needs 'strike' (variance units)")
            if c["kind"] == "varianceKnockout" and cc["strike"] is None:
                raise ConfigError(f"$.contracts[{i}]: varianceKnockout needs 'strike' (price units)")
            contracts.append(cc)
    resolved["contracts"] = contracts
    mom = resolved["moments"]
    if not mom["T"] < mom["t"]:
        raise ConfigError(f"$.moments: issuance T={mom['T']} must precede maturity t={mom['t']}")
    _schema_check(resolved)
    cfg = RunConfig(resolved)
    _check_times(cfg)
    return cfg


def _check_times(cfg: RunConfig) -> None:
    e = cfg.engine
    horizon = cfg.horizon()
    try:
        bounds = interval_boundaries(horizon, e["step"], cfg.rate_curve())
    except ValueError as err:
        raise ConfigError(f"$.engine: {err}") from None
    for i, c in enumerate(cfg.document["contracts"]):
        for key in ("T", "t"):
            if c[key] > horizon + 1e-9 or not any(abs(c[key] - b) < 1e-9 for b in bounds):
                raise ConfigError(f"$.contracts[{i}].{key}: {c[key]} is not on the time grid "
                                  f"(step {e['step']}, horizon {horizon})")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)
