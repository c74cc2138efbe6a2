"""Block-sequential sparsity learning.

For each block (or group of blocks): compute the dense-weight target on the
current stream, sort weights once by importance, then optimise the sparsity
logits (and optionally quantization clips) against

    ||F(W, X) - F(W * M, X)||_F^2 / ||F(W, X)||_F^2 + lam * (zeros / T_b - target)^2

before pushing the stream through the pruned block and moving on.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingDivergence
from .importance import METRICS, ImportanceRanking, block_activation_norms, rank_block
from .model import (
    ATTN_LAYERS, MLP_LAYERS, PRUNABLE, BlockWeights, ModelCheckpoint, attention, block_forward,
    effective_weight, embed_tokens, linear, mlp,
)
from .quant import QuantParams, quantize
from .sparsity import (
    GRANULARITIES, CandidateRates, PruneMask, SparsityParams, block_zero_fraction, layer_mask,
    masks_from_counts, surrogate_zero_fraction,
)
from .tensor import DTensor

SCOPES = ("layer", "attn_mlp", "block", "two_blocks")
PENALTIES = ("count", "surrogate")


@dataclass
class PruneConfig:
    target_sparsity: float = 0.5
    lam: float = 1.0
    learning_rate: float = 1e-2
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 8
    calib_sequences: int = 128
    calib_tokens: int = 2048
    granularity: str = "per_row"
    metric: str = "wanda"
    scope: str = "block"
    seed: int = 0
    sparsity_step: float = 0.01
    penalty: str = "count"
    two_stream: bool = False
    init_width: float = 0.01
    converge_sparsity_tol: float = 0.002
    converge_loss_rtol: float = 1e-4
    converge_window: int = 20
    converge_min_steps: int = 100
    quant_bits: int | None = None
    learn_clip: bool = True
    clip_learning_rate: float = 5e-3
    prune: bool = True

    def validate(self) -> "PruneConfig":
        if not 0.0 < self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must lie in (0, 1), got {self.target_sparsity}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")
        if self.penalty not in PENALTIES:
            raise ConfigError(f"penalty must be one of {PENALTIES}")
        if self.quant_bits is not None and not 2 <= self.quant_bits <= 8:
            raise ConfigError("quant_bits must be in [2, 8]")
        if not self.prune and self.quant_bits is None:
            raise ConfigError("nothing to learn: prune=False needs quant_bits")
        self.rates()
        return self

    def rates(self) -> CandidateRates:
        return CandidateRates.from_step(self.sparsity_step)


@dataclass
class BlockLossReport:
    block: int
    recon_loss: float
    sparsity_penalty: float
    achieved: dict[str, float]
    block_sparsity: float
    steps: int
    converged: bool
    wall_time: float = 0.0
    curve: list[dict] = field(default_factory=list)
    quant_passthrough: int = 0

    def record(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        d.pop("wall_time")
        return d


class Adam:
    """Adam with cosine learning-rate decay over a fixed step budget."""

    def __init__(self, params: list[DTensor], lr: float, total_steps: int,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.total = max(total_steps, 1)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def current_lr(self) -> float:
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(self.t, self.total) / self.total))

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- losses

def recon_term(dense_out, pruned_out) -> DTensor:
    """||dense - pruned||^2 normalised by ||dense||^2 (dense is a constant target)."""
    dense = dense_out.data if isinstance(dense_out, DTensor) else np.asarray(dense_out)
    scale = float(np.dot(dense.ravel(), dense.ravel()))
    diff = T.sub(pruned_out, DTensor._wrap(dense))
    return T.mul(T.frobenius_sq(diff), 1.0 / scale if scale > 0 else 1.0)


def block_loss(dense_out, pruned_out, masks, target: float, lam: float, total_params: int | None = None) -> DTensor:
    masks = [m if isinstance(m, DTensor) else T.as_tensor(m) for m in masks]
    if total_params is not None and total_params != sum(m.size for m in masks):
        raise ConfigError("total_params does not match mask sizes")
    rec = recon_term(dense_out, pruned_out)
    pen = T.square(T.sub(block_zero_fraction(masks), target))
    return T.add(rec, T.mul(pen, lam))


def block_recon_error(block: BlockWeights, x, masks=None, quant=None, dense_out=None) -> float:
    """Normalised reconstruction error of one block on input ``x``."""
    with T.no_grad():
        dense = block_forward(block, x).data if dense_out is None else np.asarray(dense_out)
        pruned = block_forward(block, x, masks, quant).data
    diff = pruned - dense
    return float(np.dot(diff.ravel(), diff.ravel()) / np.dot(dense.ravel(), dense.ravel()))


# --------------------------------------------------------------- helpers

def groups_for(scope: str, n_blocks: int) -> list[list[int]]:
    """Which blocks are reconstructed jointly under a scope."""
    if scope not in SCOPES:
        raise ConfigError(f"invalid scope {scope!r}; expected one of {SCOPES}")
    if scope == "two_blocks":
        return [list(range(i, min(i + 2, n_blocks))) for i in range(0, n_blocks, 2)]
    return [[i] for i in range(n_blocks)]


def uniform_counts(width: int, rate: float) -> int:
    return int(math.floor(width * rate + 1e-9))


def uniform_masks(block: BlockWeights, ranking: ImportanceRanking, rate: float) -> dict[str, np.ndarray]:
    """Remove the ``floor(in * rate)`` least important weights of every row."""
    masks = {}
    for name in PRUNABLE:
        perm = ranking[name]
        masks[name] = masks_from_counts(perm, uniform_counts(perm.shape[1], rate))
    return masks


def forward_all(fn, x: np.ndarray, batch_size: int) -> np.ndarray:
    with T.no_grad():
        parts = [fn(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


def _to_prune_masks(masks: dict[str, np.ndarray]) -> dict[str, PruneMask]:
    return {n: PruneMask.from_dense(np.asarray(m, dtype=bool), n) for n, m in masks.items()}


# ------------------------------------------------------------ optimiser

class GroupTrainer:
    """Learns masks (and clips) for a group of consecutive blocks."""

    def __init__(self, blocks: list[BlockWeights], rankings: list[ImportanceRanking],
                 x: np.ndarray, config: PruneConfig, block_ids: list[int], dense_target=None):
        self.blocks = blocks
        self.rankings = rankings
        self.cfg = config
        self.ids = block_ids
        self.rates = config.rates()
        self.x = x
        self.n_seq = x.shape[0]
        self.params: list[dict[str, SparsityParams]] = []
        self.quant: list[dict[str, QuantParams] | None] = []
        for blk in blocks:
            shapes = blk.config.layer_shapes()
            if config.prune:
                self.params.append({
                    n: SparsityParams.init(shapes[n][0], self.rates, config.granularity,
                                           config.target_sparsity, config.init_width)
                    for n in PRUNABLE
                })
            else:
                self.params.append({})
            if config.quant_bits is not None:
                self.quant.append({n: QuantParams.init(shapes[n][0], config.quant_bits, config.learn_clip)
                                   for n in PRUNABLE})
            else:
                self.quant.append(None)
        self.dense_target = self._dense_targets() if dense_target is None else dense_target
        self.total_params = sum(blk.config.block_params() for blk in blocks)

        n_batches = math.ceil(self.n_seq / config.batch_size)
        self.total_steps = config.max_steps if config.max_steps is not None else config.epochs * n_batches
        logits = [p.logits for ps in self.params for p in ps.values()]
        self.opt = Adam(logits, config.learning_rate, self.total_steps) if logits else None
        gammas = [g for qs in self.quant if qs for q in qs.values() for g in q.parameters()]
        self.qopt = Adam(gammas, config.clip_learning_rate, self.total_steps) if gammas else None
        self.rng = np.random.default_rng(config.seed)
        self._order: list[int] = []

    # -- forward pieces

    def _dense_targets(self) -> dict:
        """Constant targets, computed before any mask is applied."""
        bs = self.cfg.batch_size
        targets: dict = {}
        if self.cfg.scope in ("block", "two_blocks"):
            def run(xb):
                h = DTensor._wrap(xb)
                for blk in self.blocks:
                    h = block_forward(blk, h)
                return h.data
            targets["out"] = forward_all(run, self.x, bs)
        elif self.cfg.scope == "attn_mlp":
            blk = self.blocks[0]
            targets["attn_out"] = forward_all(
                lambda xb: attention(blk.matrices(), T.rms_norm(DTensor._wrap(xb), blk.attn_norm_gain), blk.config).data,
                self.x, bs)
        else:
            blk = self.blocks[0]
            acts = {n: [] for n in PRUNABLE}
            with T.no_grad():
                for i in range(0, self.n_seq, bs):
                    tr: dict = {}
                    block_forward(blk, self.x[i:i + bs], trace=tr)
                    for n in PRUNABLE:
                        acts[n].append(tr[f"{n}_in"].data)
            targets["layer_in"] = {n: np.concatenate(v, axis=0) for n, v in acts.items()}
            targets["layer_out"] = {
                n: forward_all(lambda a, n=n: linear(DTensor._wrap(a), getattr(blk, n)).data, v, bs)
                for n, v in targets["layer_in"].items()
            }
        return targets

    def current_masks(self, record: bool = True) -> list[dict[str, DTensor] | None]:
        out = []
        for ps, blk in zip(self.params, self.blocks):
            if not ps:
                out.append(None)
                continue
            ms = {}
            for n, p in ps.items():
                if record:
                    ms[n] = layer_mask(p, self.rankings[len(out)][n])
                else:
                    with T.no_grad():
                        ms[n] = layer_mask(p, self.rankings[len(out)][n])
            out.append(ms)
        return out

    def _penalty_terms(self, masks) -> list[tuple[DTensor, float]]:
        """(zero-fraction tensor, target) pairs the penalty pulls towards target."""
        cfg = self.cfg
        if not cfg.prune:
            return []
        if cfg.penalty == "surrogate":
            terms = []
            for ps, blk in zip(self.params, self.blocks):
                terms.append(surrogate_zero_fraction(ps, blk.config.layer_shapes()))
            if cfg.scope in ("block", "two_blocks"):
                sizes = [blk.config.block_params() for blk in self.blocks]
                acc = T.mul(terms[0], sizes[0] / sum(sizes))
                for t, s in zip(terms[1:], sizes[1:]):
                    acc = T.add(acc, T.mul(t, s / sum(sizes)))
                return [(acc, cfg.target_sparsity)]
            return [(t, cfg.target_sparsity) for t in terms]
        flat = [m for ms in masks for m in ms.values()]
        if cfg.scope in ("block", "two_blocks"):
            return [(block_zero_fraction(flat), cfg.target_sparsity)]
        ms = masks[0]
        if cfg.scope == "attn_mlp":
            return [(block_zero_fraction([ms[n] for n in ATTN_LAYERS]), cfg.target_sparsity),
                    (block_zero_fraction([ms[n] for n in MLP_LAYERS]), cfg.target_sparsity)]
        return [(block_zero_fraction([ms[n]]), cfg.target_sparsity) for n in PRUNABLE]

    def loss(self, idx: np.ndarray, masks) -> tuple[DTensor, DTensor, DTensor]:
        cfg = self.cfg
        xb = DTensor._wrap(self.x[idx])
        if cfg.scope in ("block", "two_blocks"):
            h = xb
            for blk, ms, qs in zip(self.blocks, masks, self.quant):
                h = block_forward(blk, h, ms, qs)
            rec = recon_term(self.dense_target["out"][idx], h)
        elif cfg.scope == "attn_mlp":
            blk, ms, qs = self.blocks[0], masks[0], self.quant[0]
            tr: dict = {}
            block_forward(blk, xb, ms, qs, trace=tr)
            rec_a = recon_term(self.dense_target["attn_out"][idx], tr["attn_out"])
            # the MLP target uses dense MLP weights on the pruned stream's MLP input
            with T.no_grad():
                mlp_dense = mlp(blk.matrices(), DTensor._wrap(tr["mlp_in"].data)).data
            rec = T.add(rec_a, recon_term(mlp_dense, tr["mlp_out"]))
        else:
            blk, ms, qs = self.blocks[0], masks[0], self.quant[0]
            rec = None
            for n in PRUNABLE:
                w_eff = effective_weight(getattr(blk, n), None if ms is None else ms[n],
                                         None if qs is None else qs[n], n)
                y = linear(DTensor._wrap(self.dense_target["layer_in"][n][idx]), w_eff)
                term = recon_term(self.dense_target["layer_out"][n][idx], y)
                rec = term if rec is None else T.add(rec, term)
        pen = None
        for frac, target in self._penalty_terms(masks):
            term = T.square(T.sub(frac, target))
            pen = term if pen is None else T.add(pen, term)
        if pen is None:
            return rec, rec, DTensor._wrap(np.array(0.0))
        return T.add(rec, T.mul(pen, cfg.lam)), rec, pen

    def next_batch(self) -> np.ndarray:
        bs = self.cfg.batch_size
        if len(self._order) < 1:
            self._order = list(self.rng.permutation(self.n_seq))
        take, self._order = self._order[:bs], self._order[bs:]
        return np.sort(np.asarray(take))

    def step(self) -> dict:
        """One optimiser step on logits and clips from the shared loss."""
        if self.opt:
            self.opt.zero_grad()
        if self.qopt:
            self.qopt.zero_grad()
        idx = self.next_batch()
        masks = self.current_masks()
        total, rec, pen = self.loss(idx, masks)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDivergence(f"non-finite loss at step {self.opt.t if self.opt else 0}",
                                     state=self.snapshot())
        if total.requires_grad:
            T.backward(total)
        if self.opt:
            self.opt.step()
        if self.qopt:
            self.qopt.step()
            for qs in self.quant:
                for q in qs.values():
                    q.clamp_()
        ach = self.block_sparsity(masks)
        return {"loss": value, "recon": rec.item(), "penalty": pen.item(), "sparsity": ach}

    def block_sparsity(self, masks) -> float:
        zeros = total = 0
        for ms in masks:
            if ms is None:
                continue
            for m in ms.values():
                zeros += m.size - int(m.data.sum())
                total += m.size
        return zeros / total if total else 0.0

    def snapshot(self) -> dict:
        return {
            "logits": [{n: p.logits.data.copy() for n, p in ps.items()} for ps in self.params],
            "gammas": [None if qs is None else {n: (q.gamma0.data.copy(), q.gamma1.data.copy())
                                                 for n, q in qs.items()} for qs in self.quant],
        }

    def run(self) -> list[dict]:
        cfg = self.cfg
        curve = []
        window: deque = deque(maxlen=cfg.converge_window)
        self.converged = False
        for step in range(self.total_steps):
            rec = self.step()
            rec["step"] = step
            curve.append(rec)
            window.append(rec["recon"])
            if (step + 1 >= cfg.converge_min_steps and len(window) == window.maxlen
                    and abs(rec["sparsity"] - cfg.target_sparsity) <= cfg.converge_sparsity_tol
                    and (max(window) - min(window)) <= cfg.converge_loss_rtol * max(abs(np.mean(window)), 1e-300)):
                self.converged = True
                break
        return curve

    def final_masks(self) -> list[dict[str, np.ndarray]]:
        out = []
        for bi, blk in enumerate(self.blocks):
            if self.params[bi]:
                ms = self.current_masks(record=False)[bi]
                out.append({n: m.data.astype(bool) for n, m in ms.items()})
            else:
                out.append({n: np.ones(getattr(blk, n).shape, dtype=bool) for n in PRUNABLE})
        return out


# --------------------------------------------------------------- drivers

@dataclass
class PruneResult:
    checkpoint: ModelCheckpoint
    masks: list[dict[str, PruneMask]]
    reports: list[BlockLossReport]
    quant: list[dict[str, QuantParams] | None] = field(default_factory=list)

    def global_sparsity(self) -> float:
        zeros = sum(m.zero_count for ms in self.masks for m in ms.values())
        total = sum(m.shape[0] * m.shape[1] for ms in self.masks for m in ms.values())
        return zeros / total


def prune_block(block: BlockWeights, input_stream, config: PruneConfig, ranking: ImportanceRanking | None = None,
                block_index: int = 0, dense_target=None):
    """Learn masks for a single block; returns ``(masks, report, quant)``."""
    cfg = replace(config, scope=config.scope if config.scope != "two_blocks" else "block").validate()
    x = np.asarray(input_stream.data if isinstance(input_stream, DTensor) else input_stream)
    if x.ndim == 2:
        x = x[None]
    if ranking is None:
        norms = block_activation_norms(block, x, cfg.batch_size) if cfg.metric == "wanda" else None
        ranking = rank_block(block, norms, cfg.metric)
    results = _train_group([block], [ranking], x, cfg, [block_index], dense_target)
    masks, report, quant = results[0]
    return masks, report, quant


def _train_group(blocks, rankings, x, cfg, ids, dense_target=None):
    t0 = time.perf_counter()
    trainer = GroupTrainer(blocks, rankings, x, cfg, ids, dense_target)
    curve = trainer.run()
    final = trainer.final_masks()
    elapsed = time.perf_counter() - t0

    out = []
    h = x
    for bi, (blk, ms, qs) in enumerate(zip(blocks, final, trainer.quant)):
        dense_out = forward_all(lambda xb: block_forward(blk, xb).data, h, cfg.batch_size)
        pruned_out = forward_all(lambda xb: block_forward(blk, xb, ms, qs).data, h, cfg.batch_size)
        diff = pruned_out - dense_out
        recon = float(np.dot(diff.ravel(), diff.ravel()) / np.dot(dense_out.ravel(), dense_out.ravel()))
        pm = _to_prune_masks(ms)
        zeros = sum(m.zero_count for m in pm.values())
        total = sum(m.shape[0] * m.shape[1] for m in pm.values())
        bs = zeros / total
        passthrough = 0
        if qs is not None:
            from .quant import channel_params
            for n, q in qs.items():
                passthrough += int(channel_params(getattr(blk, n).data, q.gamma0.data, q.gamma1.data, q.bits)[3].sum())
        rep = BlockLossReport(
            block=ids[bi], recon_loss=recon,
            sparsity_penalty=(bs - cfg.target_sparsity) ** 2 if cfg.prune else 0.0,
            achieved={n: m.achieved_sparsity for n, m in pm.items()},
            block_sparsity=bs, steps=len(curve), converged=trainer.converged,
            wall_time=elapsed / len(blocks), curve=curve, quant_passthrough=passthrough,
        )
        out.append((pm, rep, qs))
        h = pruned_out
    return out


def calibration_stream(checkpoint: ModelCheckpoint, calib_tokens) -> np.ndarray:
    tok = np.asarray(calib_tokens)
    if tok.ndim == 1:
        tok = tok[None]
    return embed_tokens(checkpoint, tok)


def apply_masks(block: BlockWeights, masks, quant=None) -> BlockWeights:
    """Materialise ``quantize(W) * M`` into a new block."""
    out = block.copy()
    for n in PRUNABLE:
        w = getattr(block, n)
        q = None if quant is None else quant[n]
        with T.no_grad():
            val = quantize(w, q).data if q is not None else w.data.copy()
        m = masks[n].to_dense() if hasattr(masks[n], "to_dense") else np.asarray(masks[n], dtype=bool)
        getattr(out, n).data = val * m
    return out


def prune_model(checkpoint: ModelCheckpoint, calib_tokens, config: PruneConfig,
                progress=None) -> PruneResult:
    """Prune every block in order, propagating the pruned stream."""
    cfg = config.validate()
    xp = calibration_stream(checkpoint, calib_tokens)
    xfp = xp.copy() if cfg.two_stream else None
    all_masks: list[dict[str, PruneMask]] = []
    reports: list[BlockLossReport] = []
    quants: list = []
    new_blocks: list[BlockWeights] = []
    for group in groups_for(cfg.scope, checkpoint.n_blocks):
        blocks = [checkpoint.blocks[i] for i in group]
        # rankings: block inputs along the dense path starting from the pruned stream
        rankings = []
        h = xp
        for blk in blocks:
            norms = block_activation_norms(blk, h, cfg.batch_size) if cfg.metric == "wanda" else None
            rankings.append(rank_block(blk, norms, cfg.metric))
            h = forward_all(lambda xb, blk=blk: block_forward(blk, xb).data, h, cfg.batch_size)
        dense_target = None
        if xfp is not None and cfg.scope in ("block", "two_blocks"):
            h = xfp
            for blk in blocks:
                h = forward_all(lambda xb, blk=blk: block_forward(blk, xb).data, h, cfg.batch_size)
            dense_target = {"out": h}
        results = _train_group(blocks, rankings, xp, cfg, group, dense_target)
        for blk, (pm, rep, qs) in zip(blocks, results):
            all_masks.append(pm)
            reports.append(rep)
            quants.append(qs)
            new_blocks.append(apply_masks(blk, pm, qs))
            if progress is not None:
                progress(rep)
        for blk, (pm, _, qs) in zip(blocks, results):
            xp = forward_all(lambda xb, blk=blk, pm=pm, qs=qs: block_forward(blk, xb, pm, qs).data, xp, cfg.batch_size)
            if xfp is not None:
                xfp = forward_all(lambda xb, blk=blk: block_forward(blk, xb).data, xfp, cfg.batch_size)
    return PruneResult(checkpoint.with_blocks(new_blocks), all_masks, reports, quants)


def uniform_baseline(checkpoint: ModelCheckpoint, calib_tokens, target: float, metric: str = "wanda",
                     batch_size: int = 8, quant_bits: int | None = None) -> list[dict[str, PruneMask]]:
    """Layer-wise pruning at one uniform rate with no learning (Wanda when metric='wanda').

    With ``quant_bits``, weights are quantized with unclipped Min-Max first and the
    importance is computed on the quantized weights.
    """
    if not 0.0 < target < 1.0:
        raise ConfigError("target must lie in (0, 1)")
    xp = calibration_stream(checkpoint, calib_tokens)
    out = []
    for blk in checkpoint.blocks:
        qs = None
        src = blk
        if quant_bits is not None:
            qs = {n: QuantParams.init(getattr(blk, n).shape[0], quant_bits, learnable=False) for n in PRUNABLE}
            src = apply_masks(blk, {n: np.ones(getattr(blk, n).shape, dtype=bool) for n in PRUNABLE}, qs)
        norms = block_activation_norms(src, xp, batch_size) if metric == "wanda" else None
        ranking = rank_block(src, norms, metric)
        ms = _to_prune_masks(uniform_masks(src, ranking, target))
        out.append(ms)
        xp = forward_all(lambda xb: block_forward(blk, xb, ms, qs).data, xp, batch_size)
    return out
