"""
Tiny causal transformer with low-rank projections and sparse ReLU^2 FFNs.

Pre-norm blocks: x + Attn(RMSNorm(x)), then x + FFN(RMSNorm(x)). Attention
q/k/v/o and both FFN projections are LowRankLinear layers. Token embeddings
are tied to the output head; positions use a learned absolute embedding.
Activations follow the tokens-as-columns layout of ``lowrank``: (d, B*T) with
column index b*T + t.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from ..core.exceptions import ContractViolationError, ShapeError
from ..schemas.train import Precision, TrainConfig
from .lowrank import (
    LowRankLinear,
    SavedActivations,
    SparseFfn,
    build_ffn,
    ffn_backward,
    ffn_forward,
    lr_backward,
    lr_forward,
)
from .numerics import Matrix
from .sparsity import SparsifierVariant

logger = logging.getLogger(__name__)

IGNORE_INDEX = -1
NORM_EPS = 1e-6
EMBED_STD = 0.02


def rmsnorm_forward(
    weight: np.ndarray, x: Matrix, eps: float = NORM_EPS
) -> Tuple[Matrix, Matrix, Matrix]:
    """
    RMS-normalize every column of x.

    Returns:
        (y, normed, inv_rms) with y = weight * normed
    """
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=0, keepdims=True) + eps)
    normed = x * inv_rms
    return weight[:, None] * normed, normed, inv_rms


def rmsnorm_backward(
    weight: np.ndarray, normed: Matrix, inv_rms: Matrix, grad_y: Matrix
) -> Tuple[np.ndarray, Matrix]:
    """Gradients (grad_weight, grad_x) of ``rmsnorm_forward``."""
    grad_weight = np.sum(grad_y * normed, axis=1)
    grad_normed = grad_y * weight[:, None]
    grad_x = inv_rms * (
        grad_normed - normed * np.mean(grad_normed * normed, axis=0, keepdims=True)
    )
    return grad_weight, grad_x


@dataclass
class Attention:
    """Multi-head causal self-attention with low-rank projections."""
    q: LowRankLinear
    k: LowRankLinear
    v: LowRankLinear
    o: LowRankLinear
    n_heads: int

    def projections(self) -> Iterator[Tuple[str, LowRankLinear]]:
        yield from (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o))


def _split_heads(m: Matrix, n_heads: int, batch: int, seq: int) -> np.ndarray:
    """(d, B*T) -> (B, H, T, d/H)."""
    head_dim = m.shape[0] // n_heads
    return m.reshape(n_heads, head_dim, batch, seq).transpose(2, 0, 3, 1)


def _merge_heads(m: np.ndarray) -> Matrix:
    """(B, H, T, d/H) -> (d, B*T)."""
    batch, n_heads, seq, head_dim = m.shape
    return np.ascontiguousarray(m.transpose(1, 3, 0, 2)).reshape(
        n_heads * head_dim, batch * seq
    )


@dataclass
class AttentionActivations:
    """Dense attention state kept for backward; (B, H, T, d/H) head tensors."""
    owner: int
    x: Matrix
    merged: Matrix
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray


def attention_forward(
    attn: Attention, x: Matrix, batch: int, seq: int
) -> Tuple[Matrix, AttentionActivations]:
    """Causal attention over ``batch`` sequences of length ``seq``."""
    q = _split_heads(lr_forward(attn.q, x), attn.n_heads, batch, seq)
    k = _split_heads(lr_forward(attn.k, x), attn.n_heads, batch, seq)
    v = _split_heads(lr_forward(attn.v, x), attn.n_heads, batch, seq)
    scale = 1.0 / np.sqrt(q.shape[-1])

    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)

    merged = _merge_heads(probs @ v)
    out = lr_forward(attn.o, merged)

    return out, AttentionActivations(
        owner=id(attn), x=x, merged=merged, q=q, k=k, v=v, probs=probs
    )


def attention_backward(
    attn: Attention, saved: AttentionActivations, grad_out: Matrix
) -> Tuple[Dict[str, Matrix], Matrix]:
    """
    Backward of ``attention_forward``.

    Returns:
        (grads keyed 'q.A', 'q.B', ..., grad_x)
    """
    if saved.owner != id(attn):
        raise ContractViolationError("Saved activations belong to a different attention")
    x, merged = saved.x, saved.merged
    q, k, v, probs = saved.q, saved.k, saved.v, saved.probs
    batch, _, seq, head_dim = q.shape
    scale = 1.0 / np.sqrt(head_dim)

    grads: Dict[str, Matrix] = {}
    out_grads = lr_backward(attn.o, merged, grad_out)
    grads["o.A"], grads["o.B"] = out_grads.grad_A, out_grads.grad_B

    grad_context = _split_heads(out_grads.grad_x, attn.n_heads, batch, seq)
    grad_probs = grad_context @ v.transpose(0, 1, 3, 2)
    grad_v = probs.transpose(0, 1, 3, 2) @ grad_context
    grad_scores = probs * (grad_probs - np.sum(grad_probs * probs, axis=-1, keepdims=True))
    grad_scores *= scale
    grad_q = grad_scores @ k
    grad_k = grad_scores.transpose(0, 1, 3, 2) @ q

    grad_x = np.zeros_like(x)
    for name, grad_heads in (("q", grad_q), ("k", grad_k), ("v", grad_v)):
        layer_grads = lr_backward(getattr(attn, name), x, _merge_heads(grad_heads))
        grads[f"{name}.A"], grads[f"{name}.B"] = layer_grads.grad_A, layer_grads.grad_B
        grad_x += layer_grads.grad_x
    return grads, grad_x


@dataclass
class Block:
    """Pre-norm transformer block."""
    attn_norm: np.ndarray
    attn: Attention
    ffn_norm: np.ndarray
    ffn: SparseFfn

    def low_rank_layers(self) -> Iterator[Tuple[str, LowRankLinear]]:
        for name, layer in self.attn.projections():
            yield f"attn.{name}", layer
        yield "ffn.up", self.ffn.up
        yield "ffn.down", self.ffn.down


@dataclass
class LayerActivations:
    """Per-block state kept by the forward pass."""
    attn_norm: Tuple[Matrix, Matrix]
    attn: AttentionActivations
    ffn_norm: Tuple[Matrix, Matrix]
    ffn: SavedActivations


@dataclass
class ModelActivations:
    """Everything ``model_backward`` needs from ``model_forward``."""
    owner: int
    ids: np.ndarray
    positions: np.ndarray
    batch: int
    seq: int
    sparse: bool
    layers: List[LayerActivations]
    final_norm: Tuple[Matrix, Matrix, Matrix]
    probs: Matrix
    targets: np.ndarray
    n_targets: int

    def ffn_nbytes(self, bytes_per_value: int = 2) -> float:
        """Saved FFN intermediates (pre- and post-activation) across layers."""
        return sum(layer.ffn.nbytes(["z", "a"], bytes_per_value) for layer in self.layers)


@dataclass
class ForwardResult:
    """Output of ``model_forward``."""
    logits: np.ndarray
    loss: float
    saved: ModelActivations
    layer_sparsity: List[float] = field(default_factory=list)

    @property
    def ffn_sparsity(self) -> float:
        """Mean fraction of exact zeros in post-ReLU^2 activations."""
        return float(np.mean(self.layer_sparsity)) if self.layer_sparsity else 0.0


@dataclass
class TinyTransformer:
    """Causal LM: embedding, low-rank blocks, final norm, tied output head."""
    embed: Matrix
    pos: Matrix
    blocks: List[Block]
    final_norm: np.ndarray
    n_heads: int

    @property
    def vocab_size(self) -> int:
        return int(self.embed.shape[0])

    @property
    def d_model(self) -> int:
        return int(self.embed.shape[1])

    @property
    def max_seq_len(self) -> int:
        return int(self.pos.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.embed.dtype

    @property
    def sparsify_calls(self) -> int:
        return sum(block.ffn.sparsify_calls for block in self.blocks)

    def ffns(self) -> List[SparseFfn]:
        return [block.ffn for block in self.blocks]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Every trainable array by name; arrays are shared, not copied."""
        params: Dict[str, np.ndarray] = {"embed": self.embed, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            prefix = f"layers.{i}"
            params[f"{prefix}.attn_norm"] = block.attn_norm
            params[f"{prefix}.ffn_norm"] = block.ffn_norm
            for name, layer in block.low_rank_layers():
                params[f"{prefix}.{name}.A"] = layer.A
                params[f"{prefix}.{name}.B"] = layer.B
        params["final_norm"] = self.final_norm
        return params

    def low_rank_layers(self) -> Dict[str, LowRankLinear]:
        """Low-rank layers by name, e.g. 'layers.0.ffn.up'."""
        return {
            f"layers.{i}.{name}": layer
            for i, block in enumerate(self.blocks)
            for name, layer in block.low_rank_layers()
        }

    def set_sparsifiers(self, variants: List[SparsifierVariant]) -> None:
        """Replace the per-layer FFN sparsifier variants."""
        if len(variants) != len(self.blocks):
            raise ShapeError(f"Expected {len(self.blocks)} variants, got {len(variants)}")
        for block, variant in zip(self.blocks, variants):
            block.ffn.sparsifier = variant


def build_model(config: TrainConfig, sparsifier: Optional[SparsifierVariant] = None) -> TinyTransformer:
    """
    Initialize a model from a training config.

    Low-rank factors are Xavier-uniform; embeddings are N(0, 0.02^2); norms
    start at 1. Every parameter draws from its own child of SeedSequence(seed).
    """
    dtype = Precision(config.precision).dtype
    if sparsifier is None and config.sparsifier is not None:
        sparsifier = SparsifierVariant(kind=config.sparsifier)

    root = np.random.SeedSequence(config.seed)
    embed_seed, pos_seed, *block_seeds = root.spawn(2 + config.n_layers)

    embed = np.random.default_rng(embed_seed).normal(
        0.0, EMBED_STD, size=(config.vocab_size, config.d_model)
    ).astype(dtype)
    pos = np.random.default_rng(pos_seed).normal(
        0.0, EMBED_STD, size=(config.seq_len, config.d_model)
    ).astype(dtype)

    blocks = []
    for block_seed in block_seeds:
        q_seed, k_seed, v_seed, o_seed, ffn_seed = block_seed.spawn(5)
        d, r = config.d_model, config.r_attn
        attn = Attention(
            q=LowRankLinear.xavier(d, d, r, q_seed, config.precision),
            k=LowRankLinear.xavier(d, d, r, k_seed, config.precision),
            v=LowRankLinear.xavier(d, d, r, v_seed, config.precision),
            o=LowRankLinear.xavier(d, d, r, o_seed, config.precision),
            n_heads=config.n_heads,
        )
        ffn = build_ffn(
            d, config.d_ff, config.r_mlp, ffn_seed, config.precision, sparsifier
        )
        blocks.append(
            Block(
                attn_norm=np.ones(d, dtype=dtype),
                attn=attn,
                ffn_norm=np.ones(d, dtype=dtype),
                ffn=ffn,
            )
        )

    return TinyTransformer(
        embed=embed,
        pos=pos,
        blocks=blocks,
        final_norm=np.ones(config.d_model, dtype=dtype),
        n_heads=config.n_heads,
    )


def _validate_tokens(model: TinyTransformer, tokens: np.ndarray, name: str) -> None:
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ContractViolationError(f"{name} must be integer token ids")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.vocab_size):
        raise ContractViolationError(
            f"{name} ids must lie in [0, {model.vocab_size}), got range "
            f"[{tokens.min()}, {tokens.max()}]"
        )


def model_forward(
    model: TinyTransformer,
    tokens: npt.ArrayLike,
    sparsity_on: bool = False,
    targets: Optional[npt.ArrayLike] = None,
) -> ForwardResult:
    """
    Causal LM forward pass with mean next-token cross-entropy.

    Args:
        model: Transformer
        tokens: (T,) or (B, T) token ids, T <= max_seq_len
        sparsity_on: Apply 2:4 sparsity to FFN activations
        targets: Same shape as tokens, -1 to ignore; None predicts tokens[t+1]

    Returns:
        Logits of shape (T, vocab) or (B, T, vocab), the loss, and saved state

    Raises:
        ContractViolationError: Out-of-range token ids or sequence too long
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ContractViolationError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    batch, seq = tokens.shape
    if seq > model.max_seq_len:
        raise ContractViolationError(
            f"sequence length {seq} exceeds the configured maximum {model.max_seq_len}"
        )
    _validate_tokens(model, tokens, "tokens")

    if targets is None:
        target_ids = np.full_like(tokens, IGNORE_INDEX)
        target_ids[:, :-1] = tokens[:, 1:]
    else:
        target_ids = np.asarray(targets)
        if single:
            target_ids = target_ids[None, :]
        if target_ids.shape != tokens.shape:
            raise ContractViolationError(
                f"targets shape {target_ids.shape} does not match tokens {tokens.shape}"
            )
        valid_ids = target_ids[target_ids != IGNORE_INDEX]
        _validate_tokens(model, valid_ids, "targets")

    ids = tokens.reshape(-1)
    positions = np.tile(np.arange(seq), batch)
    x = (model.embed[ids] + model.pos[positions]).T

    layers: List[LayerActivations] = []
    layer_sparsity: List[float] = []
    for block in model.blocks:
        normed_in, normed, inv_rms = rmsnorm_forward(block.attn_norm, x)
        attn_out, attn_saved = attention_forward(block.attn, normed_in, batch, seq)
        x = x + attn_out
        ffn_in, ffn_normed, ffn_inv = rmsnorm_forward(block.ffn_norm, x)
        ffn_out, ffn_saved = ffn_forward(block.ffn, ffn_in, sparsity_on)
        x = x + ffn_out
        layers.append(
            LayerActivations(
                attn_norm=(normed, inv_rms),
                attn=attn_saved,
                ffn_norm=(ffn_normed, ffn_inv),
                ffn=ffn_saved,
            )
        )
        layer_sparsity.append(ffn_saved.stats["natural_sparsity"])

    final, final_normed, final_inv = rmsnorm_forward(model.final_norm, x)
    logits = model.embed @ final

    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=0, keepdims=True)
    probs = exp / sums
    log_probs = shifted - np.log(sums)

    flat_targets = target_ids.reshape(-1)
    columns = np.nonzero(flat_targets != IGNORE_INDEX)[0]
    n_targets = int(columns.size)
    if n_targets:
        loss = float(-np.mean(log_probs[flat_targets[columns], columns], dtype=np.float64))
    else:
        loss = 0.0

    saved = ModelActivations(
        owner=id(model),
        ids=ids,
        positions=positions,
        batch=batch,
        seq=seq,
        sparse=sparsity_on,
        layers=layers,
        final_norm=(final, final_normed, final_inv),
        probs=probs,
        targets=flat_targets,
        n_targets=n_targets,
    )
    out_logits = logits.T.reshape(batch, seq, model.vocab_size)
    return ForwardResult(
        logits=out_logits[0] if single else out_logits,
        loss=loss,
        saved=saved,
        layer_sparsity=layer_sparsity,
    )


def model_backward(model: TinyTransformer, saved: ModelActivations) -> Dict[str, np.ndarray]:
    """
    Gradient of the mean cross-entropy with respect to every parameter.

    Returns:
        Mapping with the same keys as ``model.parameters()``

    Raises:
        ContractViolationError: ``saved`` came from another model
    """
    if saved.owner != id(model) or len(saved.layers) != len(model.blocks):
        raise ContractViolationError("Saved activations belong to a different model")

    grads: Dict[str, np.ndarray] = {}
    grad_logits = saved.probs.copy()
    columns = np.nonzero(saved.targets != IGNORE_INDEX)[0]
    grad_logits[saved.targets[columns], columns] -= 1
    ignored = np.ones(grad_logits.shape[1], dtype=bool)
    ignored[columns] = False
    grad_logits[:, ignored] = 0
    grad_logits /= max(saved.n_targets, 1)

    final, final_normed, final_inv = saved.final_norm
    grad_embed = grad_logits @ final.T
    grad_final = model.embed.T @ grad_logits
    grads["final_norm"], grad_x = rmsnorm_backward(
        model.final_norm, final_normed, final_inv, grad_final
    )

    for i in reversed(range(len(model.blocks))):
        block, layer = model.blocks[i], saved.layers[i]
        prefix = f"layers.{i}"

        ffn_grads = ffn_backward(block.ffn, layer.ffn, grad_x)
        grads[f"{prefix}.ffn.up.A"] = ffn_grads.up.grad_A
        grads[f"{prefix}.ffn.up.B"] = ffn_grads.up.grad_B
        grads[f"{prefix}.ffn.down.A"] = ffn_grads.down.grad_A
        grads[f"{prefix}.ffn.down.B"] = ffn_grads.down.grad_B
        grad_norm_w, grad_res = rmsnorm_backward(
            block.ffn_norm, *layer.ffn_norm, ffn_grads.grad_x
        )
        grads[f"{prefix}.ffn_norm"] = grad_norm_w
        grad_x = grad_x + grad_res

        attn_grads, grad_attn_in = attention_backward(block.attn, layer.attn, grad_x)
        for name, grad in attn_grads.items():
            grads[f"{prefix}.attn.{name}"] = grad
        grad_norm_w, grad_res = rmsnorm_backward(
            block.attn_norm, *layer.attn_norm, grad_attn_in
        )
        grads[f"{prefix}.attn_norm"] = grad_norm_w
        grad_x = grad_x + grad_res

    grad_rows = grad_x.T
    np.add.at(grad_embed, saved.ids, grad_rows)
    grad_pos = np.zeros_like(model.pos)
    np.add.at(grad_pos, saved.positions, grad_rows)
    grads["embed"] = grad_embed
    grads["pos"] = grad_pos
    return grads


def collect_ffn_activations(model: TinyTransformer, tokens: npt.ArrayLike) -> List[Matrix]:
    """
    Dense post-ReLU^2 activations of every FFN, in (tokens, d_ff) row layout.

    Used to calibrate soft_activation scales.
    """
    result = model_forward(model, tokens, sparsity_on=False)
    return [layer.ffn.get("a").T for layer in result.saved.layers]
