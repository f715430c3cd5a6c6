"""The multiscale structured-attention forecaster.

Data flow for a batch ``(B, N, T, C)``: flatten each station's history and
embed it linearly, concatenate the weighted spherical-harmonic location code
and project back to width D, then run one structured-attention block per
hierarchy level (scatter into that level's P x M layout, block, gather back),
and finally project to ``F * C`` outputs per station.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .numerics import Parameter, Tensor
from .partition import PartitionHierarchy


@dataclass
class LevelPlan:
    """Arrays a block needs for one hierarchy level."""

    perm: np.ndarray
    mask: np.ndarray  # P x M, True = real node
    intra_idx: np.ndarray  # P x M x M indices into the bias table
    coarse_idx: np.ndarray  # P x P

    @property
    def p(self) -> int:
        return self.mask.shape[0]

    @property
    def m(self) -> int:
        return self.mask.shape[1]


def bias_index(spd: np.ndarray, d_max: int) -> np.ndarray:
    """Map hop counts {-1, 0, 1, ...} to table slots {0, 1, ..., d_max + 1}; larger distances share the last slot."""
    return np.clip(spd, -1, d_max) + 1


def plan_levels(hierarchy: PartitionHierarchy, d_max: int) -> list[LevelPlan]:
    plans = []
    for lvl in hierarchy.levels:
        plans.append(LevelPlan(lvl.layout.perm, lvl.layout.pad_mask,
                               bias_index(lvl.padded_intra_spd(), d_max),
                               bias_index(lvl.coarse_spd, d_max)))
    return plans


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Per-name streams keep shared parameters identical across ablation variants.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class ModelParams:
    """Ordered collection of named parameters."""

    def __init__(self, cfg: TrainConfig, n_channels: int, seed: int | None = None):
        self.cfg = cfg
        self.n_channels = n_channels
        self.seed = cfg.seed if seed is None else seed
        self.tensors: dict[str, Parameter] = {}
        d, c = cfg.d_model, n_channels
        h = cfg.ffn_mult * d
        n_sh = (cfg.l_max + 1) ** 2
        abl = set(cfg.ablations)

        self._weight("embed_w", (cfg.t_in * c, d))
        self._zeros("embed_b", (d,))
        self.tensors["sh_w"] = Parameter(np.ones(n_sh), name="sh_w")
        self._weight("fuse_w", (d + n_sh, d))
        self._zeros("fuse_b", (d,))
        for i in range(cfg.levels):
            if "no_intra" not in abl:
                self._weight(f"b{i}.intra_wq", (d, d))
                self._weight(f"b{i}.intra_wk", (d, d))
            self._weight(f"b{i}.intra_wv", (d, d))
            self._weight(f"b{i}.intra_ffn1", (d, h))
            self._weight(f"b{i}.intra_ffn2", (h, d))
            if "no_inter" not in abl:
                for nm, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)),
                                  ("ffn1", (d, h)), ("ffn2", (h, d))):
                    self._weight(f"b{i}.inter_{nm}", shape)
            self._weight(f"b{i}.fusion_w", (2 * d, d))
        # bias tables are shared by all blocks; skipped when their attention is ablated
        if "no_sa" not in abl and "no_intra" not in abl:
            self._zeros("intra_bias", (cfg.d_max + 2,))
        if "no_sa" not in abl and "no_inter" not in abl:
            self._zeros("inter_bias", (cfg.d_max + 2,))
        self._weight("head_w", (d, cfg.f_out * c))
        self._zeros("head_b", (cfg.f_out * c,))

    def _weight(self, name, shape):
        rng = _param_rng(self.seed, name)
        self.tensors[name] = Parameter(rng.standard_normal(shape) / np.sqrt(shape[0]), name=name)

    def _zeros(self, name, shape):
        self.tensors[name] = Parameter(np.zeros(shape), name=name)

    def __getitem__(self, name) -> Parameter:
        return self.tensors[name]

    def get(self, name):
        return self.tensors.get(name)

    def __iter__(self):
        return iter(self.tensors.values())

    def count(self) -> int:
        return sum(p.value.size for p in self.tensors.values())

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.tensors[k].value[...] = v


# --------------------------------------------------------------------------
# forward pieces


def embed(x: np.ndarray, params: ModelParams) -> Tensor:
    """``(B, N, T, C) -> (B, N, D)``: flatten each station's window, then a linear map."""
    cfg = params.cfg
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[2:] != (cfg.t_in, params.n_channels):
        raise ValueError(f"expected (B, N, {cfg.t_in}, {params.n_channels}), got {x.shape}")
    flat = Tensor(x.reshape(x.shape[0], x.shape[1], -1))
    return nx.linear(flat, params["embed_w"], params["embed_b"])


def fuse_location(x_emb: Tensor, sh_basis: np.ndarray, params: ModelParams) -> Tensor:
    """Concatenate ``w * Y`` to the embedding and project back to width D."""
    b, n, _ = x_emb.shape
    n_sh = params["sh_w"].shape[0]
    if sh_basis.shape != (n, n_sh):
        raise ValueError(f"harmonic basis shape {sh_basis.shape} does not match ({n}, {n_sh})")
    if "no_sh" in params.cfg.ablations:
        code = Tensor(np.zeros((b, n, n_sh)))
    else:
        code = nx.mul(Tensor(np.broadcast_to(sh_basis, (b, n, n_sh))), params["sh_w"])
    return nx.linear(nx.concat_last(x_emb, code), params["fuse_w"], params["fuse_b"])


def _bias(params: ModelParams, table: str, idx: np.ndarray):
    t = params.get(table)
    return None if t is None else nx.gather(t, idx)


def ssa_block(x: Tensor, plan: LevelPlan, params: ModelParams, block: int,
              ledger: dict | None = None, maps: dict | None = None) -> Tensor:
    """One structured-attention block on a ``(B, P, M, D)`` layout, with residual."""
    cfg = params.cfg
    abl = cfg.ablations
    heads = cfg.heads
    pre = f"b{block}."
    b, p, m, d = x.shape
    if (p, m) != plan.mask.shape:
        raise ValueError(f"block input {(p, m)} does not match level layout {plan.mask.shape}")
    mask = plan.mask

    # local attention inside each subgraph
    if "no_intra" in abl:
        ctx = nx.linear(x, params[pre + "intra_wv"])
    else:
        bias = _bias(params, "intra_bias", plan.intra_idx)
        if bias is not None and heads > 1:
            bias = nx.reshape(bias, (p, 1, m, m))
        alpha = nx.attention_weights(x, params[pre + "intra_wq"], params[pre + "intra_wk"], bias, mask, heads)
        v = nx.linear(x, params[pre + "intra_wv"])
        if heads == 1:
            ctx = nx.matmul(alpha, v)
        else:
            ctx = nx._merge_heads(nx.matmul(alpha, nx._split_heads(v, heads)))
        if ledger is not None:
            ledger["score_entries"] = ledger.get("score_entries", 0) + p * m * m
        if maps is not None:
            a = alpha.value if heads == 1 else alpha.value.mean(axis=2)
            maps["intra"] = np.where(mask[:, :, None] & mask[:, None, :], a, 0.0)
    y = nx.ffn(ctx, params[pre + "intra_ffn1"], params[pre + "intra_ffn2"])

    # exchange between subgraph summaries
    if "no_inter" in abl:
        s_exp = Tensor(np.zeros((b, p, m, d)))
    else:
        s = nx.masked_mean(y, mask)
        bias = _bias(params, "inter_bias", plan.coarse_idx)
        all_valid = np.ones(p, dtype=bool)
        alpha = nx.attention_weights(s, params[pre + "inter_wq"], params[pre + "inter_wk"], bias,
                                     all_valid, heads)
        v = nx.linear(s, params[pre + "inter_wv"])
        if heads == 1:
            s_ctx = nx.matmul(alpha, v)
        else:
            s_ctx = nx._merge_heads(nx.matmul(alpha, nx._split_heads(v, heads)))
        s2 = nx.ffn(s_ctx, params[pre + "inter_ffn1"], params[pre + "inter_ffn2"])
        s_exp = nx.broadcast_expand(s2, m)
        if ledger is not None:
            ledger["score_entries"] = ledger.get("score_entries", 0) + p * p
        if maps is not None:
            maps["inter"] = alpha.value if heads == 1 else alpha.value.mean(axis=1)

    out = nx.linear(nx.concat_last(y, s_exp), params[pre + "fusion_w"])
    return nx.apply_mask(nx.add(out, x), mask)


def forward(params: ModelParams, plans: list[LevelPlan], sh_basis: np.ndarray, x: np.ndarray,
            ledger: dict | None = None, maps: list | None = None) -> Tensor:
    """Predict ``(B, N, F, C)`` from ``(B, N, T, C)`` (a missing batch axis is added)."""
    cfg = params.cfg
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if len(plans) != cfg.levels:
        raise ValueError(f"model has {cfg.levels} blocks but hierarchy has {len(plans)} levels")
    h = fuse_location(embed(x, params), sh_basis, params)
    for i, plan in enumerate(plans):
        if len(plan.perm) != x.shape[1]:
            raise ValueError(f"level {i} layout covers {len(plan.perm)} stations, input has {x.shape[1]}")
        level_maps = {} if maps is not None else None
        blocks = nx.layout_scatter(h, plan.perm, plan.mask)
        blocks = ssa_block(blocks, plan, params, i, ledger, level_maps)
        h = nx.layout_gather(blocks, plan.perm, plan.mask)
        if maps is not None:
            maps.append(level_maps)
    out = nx.linear(h, params["head_w"], params["head_b"])
    return nx.reshape(out, (x.shape[0], x.shape[1], cfg.f_out, params.n_channels))


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every station, step and channel."""
    return nx.mae_loss(pred, target)


def attention_maps(params: ModelParams, plans: list[LevelPlan], sh_basis: np.ndarray,
                   x: np.ndarray) -> list[dict]:
    """Post-softmax maps per level: ``intra`` (B, P, M, M) and ``inter`` (B, P, P); padding reported as 0."""
    maps: list[dict] = []
    forward(params, plans, sh_basis, x, maps=maps)
    return maps


def score_entry_count(plans: list[LevelPlan], ablations=()) -> int:
    """Attention-score entries of one sample: sum over levels of P*M^2 + P^2."""
    total = 0
    for plan in plans:
        if "no_intra" not in ablations:
            total += plan.p * plan.m * plan.m
        if "no_inter" not in ablations:
            total += plan.p * plan.p
    return total


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = "s2cast-checkpoint"


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """JSON header line, then the parameters as little-endian float64 in declared order."""
    header = {
        "format": _MAGIC,
        "version": 1,
        "config": params.cfg.to_dict(),
        "n_channels": params.n_channels,
        "seed": params.seed,
        "params": [{"name": k, "shape": list(p.shape)} for k, p in params.tensors.items()],
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for p in params.tensors.values():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        cfg = TrainConfig.from_dict(header["config"])
        params = ModelParams(cfg, header["n_channels"], header["seed"])
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated payload at {spec['name']}")
            target = params.tensors[spec["name"]]
            if target.shape != shape:
                raise ValueError(f"{path}: shape mismatch for {spec['name']}")
            target.value[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return params, header
