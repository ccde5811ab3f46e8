"""First-order parameter updates over named parameter lists.

Two rules: adam (default) and sgd with momentum. State arrays always
match parameter shapes; the step counter advances once per apply. After
an apply the gradients of the stepped parameters are cleared.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import OptimizerError
from .tensor import Tensor

KINDS = ("adam", "sgd")


class Optimizer:
    def __init__(self, named_params, kind: str = "adam", lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 momentum: float = 0.9):
        if kind not in KINDS:
            raise OptimizerError(f"unknown optimizer kind {kind!r}, want one of {KINDS}")
        self.kind = kind
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}
        for name, p in self.params:
            if name in self.state:
                raise OptimizerError(f"duplicate parameter name {name!r}")
            if kind == "adam":
                self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            else:
                self.state[name] = {"buf": np.zeros_like(p.data)}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
            g = np.ascontiguousarray(p.grad, dtype=p.data.dtype).reshape(-1)
            flat = p.data.reshape(-1)
            st = self.state[name]
            if self.kind == "adam":
                kernels.adam_update(flat, g, st["m"].reshape(-1), st["v"].reshape(-1),
                                    self.t, self.lr, self.beta1, self.beta2, self.eps)
            else:
                kernels.sgd_momentum_update(flat, g, st["buf"].reshape(-1),
                                            self.lr, self.momentum)
        for _, p in self.params:
            p.grad = None

    # -- checkpoint plumbing ---------------------------------------------
    def state_records(self, prefix: str):
        """Flatten moment arrays and the step counter into named records."""
        recs = [(f"{prefix}.t", np.asarray([float(self.t)], dtype=np.float32))]
        for name, _ in self.params:
            for key, arr in self.state[name].items():
                recs.append((f"{prefix}.{key}.{name}", arr))
        return recs

    def load_state_records(self, prefix: str, records: dict) -> None:
        key_t = f"{prefix}.t"
        if key_t in records:
            self.t = int(round(float(records[key_t].reshape(-1)[0])))
        for name, p in self.params:
            for key in self.state[name]:
                rec = records.get(f"{prefix}.{key}.{name}")
                if rec is not None:
                    self.state[name][key] = np.ascontiguousarray(
                        rec, dtype=p.data.dtype).reshape(p.data.shape)


def make_optimizer(named_params, settings, lr: float) -> Optimizer:
    """Optimizer from a settings block (kind, betas, eps, momentum) + lr."""
    return Optimizer(named_params, kind=settings.kind, lr=lr,
                     beta1=settings.beta1, beta2=settings.beta2,
                     eps=settings.eps, momentum=settings.momentum)


def optimizer_step(opt: Optimizer) -> None:
    opt.step()
