"""Hardware-aware mixed-precision bit-width search for hash-encoding neural
field models: quantizer, trainable quality oracle, cycle-accurate accelerator
model, DDPG agent, and the search loop tying them together."""

__version__ = "0.1.0"

from .agent import DdpgAgent, DdpgConfig, action_to_bits
from .oracle import NgpConfig, ToyNgpModel, psnr, render, train
from .policy import QuantPolicy, format_policy, parse_policy
from .quantizer import QuantParams, ValueRange, calibrate_range, fake_quantize
from .search import EvalResult, OracleEnv, SearchConfig, run_search
from .sim import HwConfig, SimReport, simulate

__all__ = [
    "DdpgAgent",
    "DdpgConfig",
    "EvalResult",
    "HwConfig",
    "NgpConfig",
    "OracleEnv",
    "QuantParams",
    "QuantPolicy",
    "SearchConfig",
    "SimReport",
    "ToyNgpModel",
    "ValueRange",
    "action_to_bits",
    "calibrate_range",
    "fake_quantize",
    "format_policy",
    "parse_policy",
    "psnr",
    "render",
    "run_search",
    "simulate",
    "train",
]
