"""Run configuration: one JSON document, strictly validated.

Unknown keys are rejected at every nesting level so typos fail loudly
instead of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .fabric import DeviceGroup
from .model import ModelConfig, init_weights
from .parallel_engine import Engine, ShiftPolicy, default_token_threshold
from .serving import CostModel
from .spec_decode import SpeculationConfig
from .swiftkv import SwiftKvConfig
from .tensor_core import Precision

POLICY_KINDS = ("fixed_tp", "fixed_sp", "shift")


def _take(obj: dict, where: str, allowed: dict) -> dict:
    """Pop known keys with defaults; reject anything left over."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return {k: obj.get(k, default) for k, default in allowed.items()}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    world_size: int = 2
    policy_kind: str = "shift"
    token_threshold: Optional[int] = None
    swiftkv: SwiftKvConfig = field(default_factory=SwiftKvConfig)
    speculation: SpeculationConfig = field(default_factory=SpeculationConfig)
    cost_model: CostModel = field(default_factory=CostModel)
    precision: Precision = Precision.F64
    seed: int = 0
    threaded: bool = False

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.world_size < 1:
            raise ConfigError("world_size must be >= 1")
        for name, dim in (
            ("n_heads", self.model.n_heads),
            ("vocab_size", self.model.vocab_size),
            ("ffn_dim", self.model.ffn_dim),
        ):
            if dim % self.world_size != 0:
                raise ConfigError(
                    f"{name}={dim} must be divisible by world_size={self.world_size}"
                )
        if self.policy_kind not in POLICY_KINDS:
            raise ConfigError(f"policy kind must be one of {POLICY_KINDS}")
        if self.token_threshold is not None and self.token_threshold < 1:
            raise ConfigError("token_threshold must be >= 1")
        if self.swiftkv.enabled and self.swiftkv.cut_layer is not None:
            cut = self.swiftkv.cut_layer
            if not 1 <= cut < self.model.n_layers:
                raise ConfigError(
                    f"swiftkv cut_layer {cut} must satisfy 1 <= cut < {self.model.n_layers}"
                )
        self.speculation.validate()
        self.cost_model.validate()
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        return self

    # -- resolution ------------------------------------------------------

    def resolved_threshold(self) -> int:
        if self.token_threshold is not None:
            return self.token_threshold
        return default_token_threshold(self.world_size)

    def policy(self) -> ShiftPolicy:
        if self.policy_kind == "fixed_tp":
            return ShiftPolicy.fixed_tp()
        if self.policy_kind == "fixed_sp":
            return ShiftPolicy.fixed_sp()
        return ShiftPolicy(token_threshold=self.resolved_threshold())

    def build_engine(self) -> Engine:
        weights = init_weights(self.model, self.seed, self.precision)
        group = DeviceGroup(self.world_size, threaded=self.threaded)
        return Engine(weights, group, self.policy(), swiftkv=self.swiftkv)

    def resolved(self) -> dict:
        """Full config echo with every default made explicit."""
        m = self.model
        out = {
            "model": {
                "n_layers": m.n_layers,
                "n_heads": m.n_heads,
                "head_dim": m.head_dim,
                "ffn_dim": m.ffn_dim,
                "vocab_size": m.vocab_size,
                "max_seq": m.max_seq,
            },
            "world_size": self.world_size,
            "policy": {"kind": self.policy_kind},
            "swiftkv": {
                "enabled": self.swiftkv.enabled,
                "cut_layer": self.swiftkv.resolve_cut(m.n_layers)
                if self.swiftkv.enabled
                else self.swiftkv.cut_layer,
            },
            "speculation": {
                "enabled": self.speculation.enabled,
                "min_match": self.speculation.min_match,
                "max_spec": self.speculation.max_spec,
                "window": self.speculation.window,
            },
            "cost_model": {
                "device_flops_per_s": self.cost_model.device_flops_per_s,
                "link_bytes_per_s": self.cost_model.link_bytes_per_s,
                "collective_latency_s": self.cost_model.collective_latency_s,
            },
            "precision": self.precision.value,
            "seed": self.seed,
            "threaded": self.threaded,
        }
        if self.policy_kind == "shift":
            out["policy"]["token_threshold"] = self.resolved_threshold()
        return out

    # -- construction ----------------------------------------------------

    def replace(self, **kwargs) -> "RunConfig":
        import dataclasses

        return dataclasses.replace(self, **kwargs)

    @staticmethod
    def from_dict(obj: dict) -> "RunConfig":
        top = _take(
            obj,
            "config",
            {
                "model": {},
                "world_size": 2,
                "policy": {},
                "swiftkv": {},
                "speculation": {},
                "cost_model": {},
                "precision": "f64",
                "seed": 0,
                "threaded": False,
            },
        )
        md = _take(
            top["model"],
            "model",
            {
                "n_layers": 4,
                "n_heads": 8,
                "head_dim": 16,
                "ffn_dim": 512,
                "vocab_size": 256,
                "max_seq": 4096,
            },
        )
        pd = _take(top["policy"], "policy", {"kind": "shift", "token_threshold": None})
        kd = _take(top["swiftkv"], "swiftkv", {"enabled": False, "cut_layer": None})
        sd = _take(
            top["speculation"],
            "speculation",
            {"enabled": False, "min_match": 2, "max_spec": 8, "window": 64},
        )
        cd = _take(
            top["cost_model"],
            "cost_model",
            {
                "device_flops_per_s": 1.0e10,
                "link_bytes_per_s": 1.0e9,
                "collective_latency_s": 5.0e-5,
            },
        )
        try:
            precision = Precision.parse(top["precision"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"precision: {exc}") from exc
        cfg = RunConfig(
            model=ModelConfig(
                n_layers=int(md["n_layers"]),
                n_heads=int(md["n_heads"]),
                head_dim=int(md["head_dim"]),
                ffn_dim=int(md["ffn_dim"]),
                vocab_size=int(md["vocab_size"]),
                max_seq=int(md["max_seq"]),
            ),
            world_size=int(top["world_size"]),
            policy_kind=str(pd["kind"]),
            token_threshold=None
            if pd["token_threshold"] is None
            else int(pd["token_threshold"]),
            swiftkv=SwiftKvConfig(
                enabled=bool(kd["enabled"]),
                cut_layer=None if kd["cut_layer"] is None else int(kd["cut_layer"]),
            ),
            speculation=SpeculationConfig(
                enabled=bool(sd["enabled"]),
                min_match=int(sd["min_match"]),
                max_spec=int(sd["max_spec"]),
                window=int(sd["window"]),
            ),
            cost_model=CostModel(
                device_flops_per_s=float(cd["device_flops_per_s"]),
                link_bytes_per_s=float(cd["link_bytes_per_s"]),
                collective_latency_s=float(cd["collective_latency_s"]),
            ),
            precision=precision,
            seed=int(top["seed"]),
            threaded=bool(top["threaded"]),
        )
        return cfg.validate()

    @staticmethod
    def load(path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        return RunConfig.from_dict(obj)
