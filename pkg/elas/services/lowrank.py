"""
Low-rank factored linear layers and the ReLU^2 feed-forward block.

Layout convention, used repo-wide: samples are columns. A layer input x has
shape (d_in, n_tokens) and W = A @ B maps it to (d_out, n_tokens). The 2:4
pattern runs along the feature axis, so the FFN sparsifies the transposed
(n_tokens, d_ff) view of its activation.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from ..core.exceptions import ContractViolationError, ShapeError
from ..schemas.train import Precision, SparsifierKind
from .numerics import Matrix, xavier_init
from .sparsity import (
    Packed24Tensor,
    SparsifierVariant,
    mask_top2,
    pack,
    sparsify,
    spmm,
    ste_backward,
    unpack,
)

logger = logging.getLogger(__name__)


@dataclass
class LowRankLinear:
    """W = A @ B with A: (d_out, r) and B: (r, d_in)."""
    A: Matrix
    B: Matrix

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(
                f"Low-rank factors do not chain: A {self.A.shape}, B {self.B.shape}"
            )
        if self.rank > min(self.d_out, self.d_in):
            raise ShapeError(
                f"rank {self.rank} exceeds min(d_out, d_in) = {min(self.d_out, self.d_in)}"
            )
        if self.rank > min(self.d_out, self.d_in) / 2:
            logger.warning(
                f"rank {self.rank} is above half of min({self.d_out}, {self.d_in}); "
                "the factorization saves little"
            )

    @property
    def rank(self) -> int:
        return int(self.A.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.A.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.B.shape[1])

    @classmethod
    def xavier(
        cls,
        d_out: int,
        d_in: int,
        rank: int,
        seed: Union[int, np.random.SeedSequence],
        precision: Union[Precision, str] = Precision.FLOAT32,
    ) -> "LowRankLinear":
        """Both factors Xavier-uniform, from independent child seeds."""
        sequence = (
            seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        )
        seed_a, seed_b = sequence.spawn(2)
        return cls(
            A=xavier_init(d_out, rank, seed_a, precision),
            B=xavier_init(rank, d_in, seed_b, precision),
        )

    def materialize(self) -> Matrix:
        """Dense W; for checks only."""
        return self.A @ self.B


class LowRankGrads(NamedTuple):
    """Gradients of one low-rank layer."""
    grad_A: Matrix
    grad_B: Matrix
    grad_x: Matrix


def _check_input(layer: LowRankLinear, x: Matrix) -> None:
    if x.ndim != 2 or x.shape[0] != layer.d_in:
        raise ShapeError(f"Layer expects input rows {layer.d_in}, got shape {x.shape}")


def lr_forward(layer: LowRankLinear, x: Matrix) -> Matrix:
    """A @ (B @ x) without forming A @ B."""
    _check_input(layer, x)
    return layer.A @ (layer.B @ x)


def lr_backward(layer: LowRankLinear, x: Matrix, grad_y: Matrix) -> LowRankGrads:
    """
    Gradients of y = A B x.

    grad_A = grad_y (Bx)^T, grad_B = A^T grad_y x^T, grad_x = B^T A^T grad_y.
    """
    _check_input(layer, x)
    if grad_y.shape != (layer.d_out, x.shape[1]):
        raise ShapeError(
            f"grad_y shape {grad_y.shape} does not match output "
            f"{(layer.d_out, x.shape[1])}"
        )
    hidden = layer.B @ x
    grad_hidden = layer.A.T @ grad_y
    return LowRankGrads(
        grad_A=grad_y @ hidden.T,
        grad_B=grad_hidden @ x.T,
        grad_x=layer.B.T @ grad_hidden,
    )


def relu2_forward(z: Matrix) -> Matrix:
    """(max(0, z))^2 elementwise."""
    positive = np.maximum(z, 0)
    return positive * positive


def relu2_backward(z: Matrix, grad_out: Matrix) -> Matrix:
    """2 max(0, z) * grad_out; the derivative at 0 is 0."""
    if z.shape != grad_out.shape:
        raise ShapeError(f"relu2_backward shape mismatch: {z.shape} vs {grad_out.shape}")
    return 2 * np.maximum(z, 0) * grad_out


class StorageKind(str, Enum):
    """How a saved tensor is stored for backward."""
    DENSE = "dense"
    PACKED = "packed"


@dataclass
class SavedTensor:
    """One tensor kept for backward, dense or 2:4-packed."""
    kind: StorageKind
    dense: Optional[Matrix] = None
    packed: Optional[Packed24Tensor] = None
    transposed: bool = False

    def materialize(self) -> Matrix:
        """Dense view in the layer's (features, tokens) layout."""
        if self.kind == StorageKind.PACKED:
            assert self.packed is not None
            matrix = unpack(self.packed)
        else:
            assert self.dense is not None
            matrix = self.dense
        return matrix.T if self.transposed else matrix

    def nbytes(self, bytes_per_value: int = 2) -> float:
        """Storage at ``bytes_per_value`` per element (16-bit by default)."""
        if self.kind == StorageKind.PACKED:
            assert self.packed is not None
            return self.packed.nbytes_packed(bytes_per_value)
        assert self.dense is not None
        return float(self.dense.size * bytes_per_value)


@dataclass
class SavedActivations:
    """Tensors a forward pass keeps for its backward pass."""
    owner: int
    sparse: bool = False
    tensors: Dict[str, SavedTensor] = field(default_factory=dict)
    stats: Dict[str, float] = field(default_factory=dict)

    def save_dense(self, name: str, matrix: Matrix) -> None:
        self.tensors[name] = SavedTensor(kind=StorageKind.DENSE, dense=matrix)

    def save_packed(self, name: str, packed: Packed24Tensor, transposed: bool = True) -> None:
        self.tensors[name] = SavedTensor(
            kind=StorageKind.PACKED, packed=packed, transposed=transposed
        )

    def get(self, name: str) -> Matrix:
        if name not in self.tensors:
            raise ContractViolationError(f"Saved activations have no tensor {name!r}")
        return self.tensors[name].materialize()

    def kind_of(self, name: str) -> StorageKind:
        return self.tensors[name].kind

    def nbytes(self, names: Optional[List[str]] = None, bytes_per_value: int = 2) -> float:
        selected = names if names is not None else list(self.tensors)
        return sum(self.tensors[n].nbytes(bytes_per_value) for n in selected)


@dataclass
class SparseFfn:
    """MLP(x) = down(ReLU^2(up(x))) with optional 2:4 sparsity on the activation."""
    up: LowRankLinear
    down: LowRankLinear
    sparsifier: SparsifierVariant = field(default_factory=SparsifierVariant)
    sparsity_enabled: bool = True
    sparsify_calls: int = 0

    def __post_init__(self) -> None:
        if self.up.d_out != self.down.d_in or self.up.d_in != self.down.d_out:
            raise ShapeError(
                f"FFN factors do not chain: up {self.up.d_out}x{self.up.d_in}, "
                f"down {self.down.d_out}x{self.down.d_in}"
            )
        if self.sparsity_enabled and self.d_ff % 4:
            raise ShapeError(f"d_ff = {self.d_ff} must be a multiple of 4 for 2:4 sparsity")

    @property
    def d_ff(self) -> int:
        return self.up.d_out

    @property
    def d_model(self) -> int:
        return self.up.d_in


@dataclass
class FfnGrads:
    """Gradients of one FFN block plus the activation gradients around the sparsifier."""
    up: LowRankGrads
    down: LowRankGrads
    grad_x: Matrix
    grad_activation_post: Matrix
    grad_activation_pre: Matrix


def ffn_forward(
    ffn: SparseFfn, x: Matrix, sparsity_on: bool
) -> Tuple[Matrix, SavedActivations]:
    """
    Forward pass of the FFN block.

    With sparsity on, the ReLU^2 output is sparsified along the feature axis,
    stored packed, and fed to the down projection through ``spmm``. Backward
    then keeps two packed tensors: the sparsified activation and the
    pre-activation masked to the kept positions.

    Returns:
        (y, saved) with y of shape (d_model, n_tokens)
    """
    sparse = sparsity_on and ffn.sparsity_enabled
    if sparse and ffn.d_ff % 4:
        raise ShapeError(f"d_ff = {ffn.d_ff} must be a multiple of 4 for 2:4 sparsity")

    z = lr_forward(ffn.up, x)
    a = relu2_forward(z)
    saved = SavedActivations(owner=id(ffn), sparse=sparse)
    saved.save_dense("x", x)
    saved.stats["natural_sparsity"] = float(np.mean(a == 0)) if a.size else 0.0

    if not sparse:
        y = lr_forward(ffn.down, a)
        saved.save_dense("z", z)
        saved.save_dense("a", a)
        return y, saved

    rows = a.T
    kept = mask_top2(rows)
    if ffn.sparsifier.kind == SparsifierKind.NAIVE:
        sparse_rows = np.where(kept, rows, rows.dtype.type(0))
    else:
        sparse_rows = sparsify(rows, ffn.sparsifier)
    ffn.sparsify_calls += 1

    packed_a = pack(sparse_rows)
    packed_z = pack(np.where(kept, z.T, z.dtype.type(0)))
    hidden = spmm(packed_a, ffn.down.B.T).T
    y = ffn.down.A @ hidden

    saved.save_packed("a", packed_a)
    saved.save_packed("z", packed_z)
    return y, saved


def ffn_backward(ffn: SparseFfn, saved: SavedActivations, grad_y: Matrix) -> FfnGrads:
    """
    Backward pass matching ``ffn_forward``.

    The down projection sees the (sparsified) activation as its input; the
    sparsifier passes gradients straight through; ReLU^2 uses the saved
    pre-activation, which under sparsity is zero at dropped positions.

    Raises:
        ContractViolationError: ``saved`` came from another FFN or batch
    """
    if saved.owner != id(ffn):
        raise ContractViolationError("Saved activations belong to a different FFN")
    x = saved.get("x")
    if grad_y.shape != (ffn.d_model, x.shape[1]):
        raise ContractViolationError(
            f"grad_y shape {grad_y.shape} does not match saved batch "
            f"{(ffn.d_model, x.shape[1])}"
        )

    a = saved.get("a")
    z = saved.get("z")
    down = lr_backward(ffn.down, a, grad_y)
    grad_post = down.grad_x
    grad_pre = ste_backward(grad_post) if saved.sparse else grad_post
    grad_z = relu2_backward(z, grad_pre)
    up = lr_backward(ffn.up, x, grad_z)

    return FfnGrads(
        up=up,
        down=down,
        grad_x=up.grad_x,
        grad_activation_post=grad_post,
        grad_activation_pre=grad_pre,
    )


def build_ffn(
    d_model: int,
    d_ff: int,
    rank: int,
    seed: Union[int, np.random.SeedSequence],
    precision: Union[Precision, str] = Precision.FLOAT32,
    sparsifier: Optional[SparsifierVariant] = None,
) -> SparseFfn:
    """Xavier-initialized FFN; sparsity is enabled iff a sparsifier is given."""
    sequence = (
        seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    )
    seed_up, seed_down = sequence.spawn(2)
    return SparseFfn(
        up=LowRankLinear.xavier(d_ff, d_model, rank, seed_up, precision),
        down=LowRankLinear.xavier(d_model, d_ff, rank, seed_down, precision),
        sparsifier=sparsifier or SparsifierVariant(),
        sparsity_enabled=sparsifier is not None,
    )
