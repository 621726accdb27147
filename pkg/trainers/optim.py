from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch
from torch.optim.optimizer import Optimizer

from utils.errors import NonFiniteError


@dataclass
class AdamState:
    """First/second moment estimates per named tensor and the step counter."""
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def _check_finite(name, grad):
    if not torch.all(torch.isfinite(grad)):
        bad = int((~torch.isfinite(grad)).sum())
        raise NonFiniteError(f"non-finite gradient in {name}: {bad} of {grad.numel()} entries")


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """Bias-corrected Adam on one tensor; updates p, m, v in place."""
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    p.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: AdamState,
              lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8, t=None,
              ) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """Functional Adam step: returns new params and state, inputs are not modified.

    `t` defaults to state.t + 1.

    Raises:
        NonFiniteError: a gradient holds NaN or Inf
    """
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ValueError(f"step t must be >= 1, got {t}")
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != param shape {tuple(params[name].shape)} for {name}")
        _check_finite(name, g)

    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.items():
            p_new = p.detach().clone()
            m = state.m[name].clone() if name in state.m else torch.zeros_like(p_new)
            v = state.v[name].clone() if name in state.v else torch.zeros_like(p_new)
            adam_update(p_new, grads[name].detach(), m, v, t, lr, beta1, beta2, eps)
            new_params[name], new_m[name], new_v[name] = p_new, m, v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


class Adam(Optimizer):
    """torch Optimizer running `adam_update` on every parameter, aborting on non-finite gradients."""

    def __init__(self, params, lr=0.0005, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps)
        super(Adam, self).__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        # check everything first so a bad gradient leaves all parameters untouched
        for group in self.param_groups:
            for i, p in enumerate(group['params']):
                if p.grad is not None:
                    _check_finite(f'param {i} of shape {tuple(p.shape)}', p.grad)

        for group in self.param_groups:
            b1, b2 = group['betas']
            for p in group['params']:
                if p.grad is None:
                    continue
                state = self.state[p]
                # Lazy state initialization
                if len(state) == 0:
                    state['step'] = 0
                    state['m'] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state['v'] = torch.zeros_like(p, memory_format=torch.preserve_format)
                state['step'] += 1
                adam_update(p, p.grad, state['m'], state['v'], state['step'], group['lr'], b1, b2, group['eps'])
        return loss
