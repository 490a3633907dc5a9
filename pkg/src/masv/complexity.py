"""Closed-form parameter counts and FLOP estimates for MASV configurations.

Counting conventions:

* a multiply-accumulate is 2 FLOPs;
* every other elementwise operation (add, scale, compare, exp, tanh, ...) is 1;
* batch-norm at inference is folded to one scale and one shift (2 per element);
* instance norm is mean (1) + variance (2) + normalize (2) + affine (2) = 7 per element;
* sigmoid is 1, SiLU is 2 (sigmoid then multiply), softplus is 1.

Costs are for a single utterance (batch 1).  Every time-dependent term is
linear in the frame count ``T``; pooling and the embedding head add a constant.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from .blocks import ABLATIONS, ModelConfig
from .errors import ContractError

# Frames at which FLOPs are quoted for the 6.2G comparison (see calibrate_frames).
CALIBRATION_FRAMES = 130  # calibrate_frames gives 131 for C=1024; rounded to 1.3 s at a 10 ms shift

# Published figures used as comparison points (reference, not computed).
REFERENCE = {
    "base_c512_params": 6.2e6,
    "lcb_c512_params": 8.7e6,
    "tri_c512_params": 9.1e6,
    "complete_c512_params": 9.2e6,
    "masv_c1024_params": 22.2e6,
    "masv_c1024_flops": 6.2e9,
}


@dataclass
class LayerCost:
    name: str
    params: int
    per_frame: float   # FLOPs per input frame
    fixed: float = 0.0  # FLOPs independent of T

    def flops(self, T: int) -> float:
        return self.per_frame * T + self.fixed


@dataclass
class CostReport:
    config: dict
    layers: list[LayerCost] = field(default_factory=list)
    T: int = 1

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def flops_per_frame(self) -> float:
        return sum(layer.per_frame for layer in self.layers)

    def flops_total(self, T: int | None = None) -> float:
        T = self.T if T is None else T
        return sum(layer.flops(T) for layer in self.layers)

    def breakdown(self) -> list[dict]:
        return [
            {"layer": layer.name, "params": layer.params, "flops": layer.flops(self.T)}
            for layer in self.layers
        ]

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "T": self.T, "params": self.params,
             "flops_total": self.flops_total(), "breakdown": self.breakdown()},
            indent=2, sort_keys=True,
        )


# -- per-module (params, per-frame FLOPs, fixed FLOPs) ------------------------

def _pointwise(cin, cout, bias=True):
    return cin * cout + (cout if bias else 0), 2.0 * cin * cout + (cout if bias else 0)


def _conv_relu_bn(cin, cout, k=1):
    p = cin * cout * k + cout + 2 * cout
    f = 2.0 * cin * cout * k + cout + cout + 2 * cout
    return p, f


def _mamba(D, N, expand, k_conv):
    inner = expand * D
    rank = math.ceil(D / 16)
    p = (D * 2 * inner               # in_proj
         + inner * k_conv + inner    # depthwise conv
         + inner * N * 3             # A_log, B_proj, C_proj
         + inner * rank * 2 + inner  # dt low-rank + bias
         + inner                     # D skip
         + inner * D)                # out_proj
    f = (2.0 * D * 2 * inner
         + 2.0 * inner * k_conv + inner + 2 * inner           # conv + bias + SiLU
         + 2.0 * inner * rank * 2 + inner + inner             # dt projections, bias, softplus
         + 2.0 * inner * N * 2                                # B and C projections
         + 3.0 * inner * N + inner                            # delta*A, exp, delta*u*B; delta*u
         + 2.0 * inner * N                                    # recurrence
         + 2.0 * inner * N + 2 * inner                        # C.h and D*u
         + 2 * inner + inner                                  # SiLU(gate) and gating
         + 2.0 * inner * D)
    return p, f


def _lcb(W, N, expand, k_conv, c):
    mp, mf = _mamba(W, N, expand, k_conv)
    ctx_p = W * c
    ctx_f = 2.0 * W * (c + 1) if c else 0.0
    path_p = ctx_p + mp + 2 * W
    path_f = ctx_f + mf + 7 * W
    p = 2 * W + 2 * path_p + 2 * W * W + 2 * W
    f = (W + 7 * W) + 2 * path_f + 2.0 * 2 * W * W + W + (W + 7 * W)
    return p, f


def _res2(W, scale, k=3):
    g = W // scale
    n = 1 if scale == 1 else scale - 1
    p, f = _conv_relu_bn(g, g, k)
    adds = 0 if scale == 1 else (n - 1) * g
    return n * p, n * f + adds


def _se(C, reduction):
    h = C // reduction
    p = C * h + h + h * C + C
    fixed = 2.0 * C * h + h + h + 2.0 * h * C + C + C
    # time mean (1 per element) and gating multiply (1 per element)
    return p, 2.0 * C, fixed


def layer_costs(cfg: ModelConfig) -> list[LayerCost]:
    C, W = cfg.channels, cfg.width
    mfa, H = cfg.mfa_channels, cfg.asp_hidden
    layers = []
    p, f = _conv_relu_bn(cfg.input_dim, C, cfg.stem_kernel)
    layers.append(LayerCost("stem", p, f))
    for i in range(cfg.num_tri_blocks):
        tag = f"block{i}"
        sp, sf, sfix = _se(C, cfg.se_reduction)
        if cfg.baseline_res2:
            p1, f1 = _conv_relu_bn(C, C)
            pr, fr = _res2(C, cfg.res2_scale)
            layers += [LayerCost(f"{tag}.conv1", p1, f1), LayerCost(f"{tag}.res2", pr, fr),
                       LayerCost(f"{tag}.conv2", p1, f1)]
        else:
            pin, fin = _conv_relu_bn(C, W)
            pout, fout = _conv_relu_bn(W, C)
            layers.append(LayerCost(f"{tag}.conv_in", pin, fin))
            if cfg.use_lcb:
                pl, fl = _lcb(W, cfg.state_dim, cfg.expand, cfg.k_conv, cfg.context_window)
                layers.append(LayerCost(f"{tag}.lcb_mamba", pl, fl))
            else:
                pl, fl = _res2(W, cfg.res2_scale)
                layers.append(LayerCost(f"{tag}.res2", pl, fl))
            if cfg.use_tri:
                pg, fg = _mamba(W, cfg.state_dim, cfg.expand, cfg.k_conv)
                layers.append(LayerCost(f"{tag}.global_mamba", pg + 2 * W, fg + W + 2 * W))
            layers.append(LayerCost(f"{tag}.conv_out", pout, fout))
        layers.append(LayerCost(f"{tag}.se", sp, sf + C, sfix))  # + C: residual add
        if cfg.use_full_skip and i < cfg.num_tri_blocks - 1:
            layers.append(LayerCost(f"{tag}.skip", 0, float(C)))
    p, f = _pointwise(cfg.num_tri_blocks * C, mfa)
    layers.append(LayerCost("mfa", p, f + mfa))
    pa, fa = _pointwise(mfa, H)
    pb, fb = _pointwise(H, mfa)
    # attention scorer + tanh, softmax (exp, sum, divide), weighted mean and second moment
    asp_frame = fa + H + fb + 3.0 * mfa + 2.0 * mfa + 3.0 * mfa
    layers.append(LayerCost("asp", pa + pb, asp_frame, fixed=4.0 * mfa))
    E = cfg.embedding_dim
    layers.append(LayerCost("pool_bn", 2 * 2 * mfa, 0.0, fixed=2.0 * 2 * mfa))
    layers.append(LayerCost("fc", 2 * mfa * E + E, 0.0, fixed=2.0 * 2 * mfa * E + E + 3.0 * E))
    return layers


def count_params(cfg: ModelConfig) -> int:
    """Analytic parameter count (equals ``MASV(cfg).num_parameters()``)."""
    return sum(layer.params for layer in layer_costs(cfg))


def estimate_flops(cfg: ModelConfig, T: int = CALIBRATION_FRAMES) -> CostReport:
    if T < 1:
        raise ContractError("FLOP estimate needs T >= 1 frames")
    return CostReport(cfg.to_dict(), layer_costs(cfg), T)


def calibrate_frames(cfg: ModelConfig, target_flops: float = REFERENCE["masv_c1024_flops"]) -> int:
    """Frame count at which ``cfg`` costs ``target_flops``; how CALIBRATION_FRAMES was chosen."""
    rep = estimate_flops(cfg, 1)
    fixed = rep.flops_total(0)
    return max(1, round((target_flops - fixed) / rep.flops_per_frame))


# -- comparison table --------------------------------------------------------

def default_matrix(channels: int = 512) -> list[tuple[str, ModelConfig]]:
    """The four ablation rows: base, +LCB, +Tri, complete."""
    return [(name, ModelConfig.ablation(name, channels=channels)) for name in ("base", "lcb", "tri", "complete")]


def emit_comparison(configs, T: int = CALIBRATION_FRAMES) -> tuple[str, str]:
    """CSV ``name,params,flops`` sorted by params, plus a JSON breakdown per row."""
    if not configs:
        raise ContractError("emit_comparison needs at least one config")
    rows = []
    for name, cfg in configs:
        rep = estimate_flops(cfg, T)
        rows.append((rep.params, name, rep))
    rows.sort(key=lambda r: (r[0], r[1]))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["name", "params", "flops"])
    for params, name, rep in rows:
        w.writerow([name, params, f"{rep.flops_total():.6e}"])
    breakdown = {name: json.loads(rep.to_json()) for _, name, rep in rows}
    return out.getvalue(), json.dumps(breakdown, indent=2, sort_keys=True)


def parse_comparison(text: str) -> list[tuple[str, int, float]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["name", "params", "flops"]:
        raise ContractError(f"unexpected comparison header {header}")
    return [(name, int(p), float(f)) for name, p, f in reader]


__all__ = [
    "ABLATIONS", "CALIBRATION_FRAMES", "CostReport", "LayerCost", "REFERENCE", "calibrate_frames",
    "count_params", "default_matrix", "emit_comparison", "estimate_flops", "layer_costs", "parse_comparison",
]
