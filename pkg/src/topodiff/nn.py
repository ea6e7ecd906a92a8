"""Small float64 numeric layer on top of torch autograd.

Parameters are plain ``torch.nn.Parameter`` objects held by ``nn.Module``
subclasses. This module adds the pieces the networks share: seeded
uniform initialisation, masked softmax, sinusoidal position codes, an
Adam implementation that refuses non-finite gradients, a single-use
gradient tape, a central-difference gradient checker and a JSON
checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in tensor {name!r}; update rejected")


class TapeError(RuntimeError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def uniform_init(module: nn.Module, rng: np.random.Generator) -> None:
    """Fill every parameter with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    fan_in is the trailing dimension for matrices and the vector length
    for vectors; parameters are visited in registration order so the
    result depends only on ``rng``.
    """
    with torch.no_grad():
        for _, p in module.named_parameters():
            fan_in = p.shape[-1] if p.dim() > 1 else p.shape[0]
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            p.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=tuple(p.shape)), dtype=DTYPE))


def zero_init(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class Affine(nn.Module):
    """x -> W x + b over the last axis."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.W = nn.Parameter(torch.zeros(d_out, d_in, dtype=DTYPE))
        self.b = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return affine(x, self.W, self.b)


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if W.dim() != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, W {tuple(W.shape)}, b {tuple(b.shape)}")
    return x @ W.T + b


class MLP(nn.Module):
    """Two affine maps with a ReLU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.hidden = Affine(d_in, d_hidden)
        self.out = Affine(d_hidden, d_out)

    def forward(self, x):
        return self.out(torch.relu(self.hidden(x)))


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """log-softmax over the last axis restricted to ``mask``; masked entries get -inf."""
    mask = mask.to(torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("every row needs at least one unmasked entry")
    neg_inf = torch.tensor(-math.inf, dtype=logits.dtype)
    filled = torch.where(mask, logits, neg_inf)
    top = filled.max(dim=-1, keepdim=True).values.detach()
    shifted = torch.where(mask, logits - top, neg_inf)
    return shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)


def softmax_normalize(logits, mask=None) -> torch.Tensor:
    logits = as_tensor(logits)
    mask = torch.ones_like(logits, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool)
    logp = masked_log_softmax(logits, mask)
    return torch.where(mask, logp.exp(), torch.zeros_like(logits))


def positional_encoding(t, dim: int) -> torch.Tensor:
    """Sinusoidal code; ``t`` may be a scalar or an integer array (codes stack on the last axis)."""
    if dim % 2:
        raise ValueError(f"positional encoding dimension must be even, got {dim}")
    t = torch.as_tensor(np.asarray(t, dtype=float), dtype=DTYPE)
    freq = torch.as_tensor(10000.0 ** (-np.arange(0, dim, 2) / dim), dtype=DTYPE)
    angle = t[..., None] * freq
    out = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1)
    return out.reshape(*t.shape, dim)


class Tape:
    """One forward, one backward.

    >>> with Tape(params) as tape:
    ...     loss = f()
    ...     tape.backward(loss)
    """

    def __init__(self, params: Iterable[torch.Tensor]):
        self.params = list(params)
        self._used = False

    def __enter__(self):
        for p in self.params:
            p.grad = None
        return self

    def __exit__(self, *exc):
        return False

    def backward(self, output: torch.Tensor) -> None:
        if self._used:
            raise TapeError("backward already ran on this tape; re-run the forward pass first")
        if output.dim() != 0:
            raise TapeError("backward needs a scalar output")
        self._used = True
        output.backward()
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)


class Adam:
    """Adam with bias correction over named parameters.

    ``clip_norm > 0`` rescales the joint gradient to at most that global norm.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = dict(named_params)
        self.clip_norm = clip_norm
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not bool(torch.isfinite(g).all()):
                raise NonFiniteGradientError(name)
            grads[name] = g
        if self.clip_norm > 0:
            norm = float(torch.sqrt(sum((g * g).sum() for g in grads.values())))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads[name]
                self.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
                self.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
                m_hat = self.m[name] / c1
                v_hat = self.v[name] / c2
                p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: v.detach().clone() for k, v in self.m.items()},
            "v": {k: v.detach().clone() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: Mapping) -> None:
        self.step_count = int(state["step"])
        for k in self.params:
            self.m[k] = as_tensor(state["m"][k]).reshape(self.params[k].shape).clone()
            self.v[k] = as_tensor(state["v"][k]).reshape(self.params[k].shape).clone()


def adam_step(opt: Adam) -> None:
    opt.step()


def grad_check(f: Callable[[], torch.Tensor], params: Iterable[torch.Tensor], eps: float = 1e-5) -> float:
    """Largest |g_tape - g_fd| / max(1, |g_fd|) over every parameter entry.

    ``f`` must rebuild its output from the current parameter values on
    each call.
    """
    params = list(params)
    with Tape(params) as tape:
        tape.backward(f())
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                worst = max(worst, abs(gflat[i].item() - fd) / max(1.0, abs(fd)))
    return worst


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def tensors_to_document(tensors: Mapping[str, torch.Tensor], header: Mapping) -> dict:
    return {
        "header": dict(header),
        "tensors": {
            name: {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
            for name, t in tensors.items()
        },
    }


def tensors_from_document(doc: Mapping) -> tuple[dict[str, torch.Tensor], dict]:
    out = {}
    for name, rec in doc["tensors"].items():
        values = torch.as_tensor(rec["values"], dtype=DTYPE)
        out[name] = values.reshape(rec["shape"])
    return out, dict(doc["header"])
