import hashlib
import math
from contextlib import contextmanager
from typing import Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np
import torch

# Вся арифметика в float64
torch.set_default_dtype(torch.float64)

DTYPE = torch.float64
EPS_DIV = 1e-10

# DiffArray: обычный torch.Tensor, лентой служит граф autograd
DiffArray = torch.Tensor


class ShapeMismatchError(ValueError):
    """Несовместимые формы операндов"""

    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(
            f"{op}: несовместимые формы {self.shape_a} и {self.shape_b}"
        )


class NonScalarLossError(ValueError):
    """backward вызван не на скаляре"""


def as_array(values, requires_grad: bool = False) -> DiffArray:
    """
    Превращение чисел / numpy в DiffArray (float64)

    Args:
        values: Число, список или np.ndarray
        requires_grad: Записывать ли операции на ленту

    Returns:
        Тензор float64
    """
    if isinstance(values, torch.Tensor):
        arr = values.detach().to(DTYPE).clone()
    else:
        arr = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE).clone()
    return arr.requires_grad_(requires_grad)


def _broadcast_check(op: str, a: DiffArray, b: DiffArray):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    _broadcast_check("add", a, b)
    return a + b


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    _broadcast_check("mul", a, b)
    return a * b


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != inner_b:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return a @ b


def concat(arrays: Sequence[DiffArray], dim: int = -1) -> DiffArray:
    first = arrays[0]
    for other in arrays[1:]:
        if other.dim() != first.dim():
            raise ShapeMismatchError("concat", first.shape, other.shape)
        d = dim % first.dim()
        rest_a = [s for i, s in enumerate(first.shape) if i != d]
        rest_b = [s for i, s in enumerate(other.shape) if i != d]
        if rest_a != rest_b:
            raise ShapeMismatchError("concat", first.shape, other.shape)
    return torch.cat(list(arrays), dim=dim)


def sum_(a: DiffArray, dim=None, keepdim: bool = False) -> DiffArray:
    if dim is None:
        return a.sum()
    return a.sum(dim=dim, keepdim=keepdim)


def mean(a: DiffArray, dim=None, keepdim: bool = False) -> DiffArray:
    if dim is None:
        return a.mean()
    return a.mean(dim=dim, keepdim=keepdim)


def sigmoid(a: DiffArray) -> DiffArray:
    return torch.sigmoid(a)


def tanh(a: DiffArray) -> DiffArray:
    return torch.tanh(a)


def relu(a: DiffArray) -> DiffArray:
    return torch.relu(a)


def softmax(a: DiffArray, dim: int = -1) -> DiffArray:
    return torch.softmax(a, dim=dim)


def square(a: DiffArray) -> DiffArray:
    return a * a


def safe_reciprocal(a: DiffArray, eps: float = EPS_DIV) -> DiffArray:
    """1 / (a + eps), знаменатели рендера всегда неотрицательны"""
    return 1.0 / (a + eps)


def backward(loss: DiffArray):
    """
    Обратный проход по ленте

    Args:
        loss: Скалярный лосс (форма [] или [1])
    """
    if loss.numel() != 1:
        raise NonScalarLossError(f"Лосс должен быть скаляром, получена форма {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise NonScalarLossError("Лосс не записан на ленту (requires_grad=False)")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[DiffArray]):
    """Обнуление градиентов (точные нули, не None)"""
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


@contextmanager
def frozen(module: torch.nn.Module) -> Iterator[torch.nn.Module]:
    """Временная заморозка параметров модуля (градиенты в них не копятся)"""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


class AdamStepper:
    """Adam поверх torch.optim с проверкой гиперпараметров"""

    def __init__(
        self,
        params: Union[Iterable[DiffArray], List[dict]],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        params = list(params)
        for group in params:
            group_lr = group.get("lr", lr) if isinstance(group, dict) else lr
            if not group_lr > 0 or not math.isfinite(group_lr):
                raise ValueError(f"Learning rate должен быть > 0, получено {group_lr}")
        if not lr > 0:
            raise ValueError(f"Learning rate должен быть > 0, получено {lr}")
        self.optimizer = torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)

    def step(self):
        """Один шаг Adam; моменты копятся между вызовами"""
        self.optimizer.step()

    def zero_grad(self):
        zero_grad(p for group in self.optimizer.param_groups for p in group["params"])

    def state_dict(self) -> dict:
        return self.optimizer.state_dict()

    def load_state_dict(self, state: dict):
        self.optimizer.load_state_dict(state)


def adam_step(stepper: AdamStepper):
    """Шаг оптимизатора с последующим обнулением градиентов"""
    stepper.step()
    stepper.zero_grad()


def params_checksum(params: Iterable[DiffArray]) -> str:
    """SHA256 параметров, для проверки неизменности"""
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
