#!/usr/bin/env python3
"""
Guarded Adam / AdamW
torch optimizers that skip any parameter group whose gradient is non-finite.
"""

import logging
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import torch
from torch import Tensor

logger = logging.getLogger(__name__)

OPTIMIZERS = {
    'adam': torch.optim.Adam,
    'adamw': torch.optim.AdamW,
}


class GuardedOptimizer:
    """
    Optimizer state: moments per parameter group, step counter, hyperparameters

    A group with any non-finite gradient has its gradients dropped for that
    step (no moment or parameter update) and the skip counter increments.
    """

    def __init__(self, params: Union[Iterable[Tensor], List[Dict[str, Any]]], kind: str = 'adam',
                 lr: float = 1e-3, betas: Sequence[float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if kind not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer '{kind}' (expected one of {list(OPTIMIZERS)})")
        self.kind = kind
        self.optimizer = OPTIMIZERS[kind](params, lr=lr, betas=tuple(betas), eps=eps,
                                          weight_decay=weight_decay)
        self.skipped_groups = 0
        self.steps = 0

    @property
    def param_groups(self) -> List[Dict[str, Any]]:
        return self.optimizer.param_groups

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> int:
        """Apply one update; returns the number of groups skipped this step"""
        skipped = 0
        for index, group in enumerate(self.optimizer.param_groups):
            grads = [p.grad for p in group['params'] if p.grad is not None]
            if grads and not all(bool(torch.isfinite(g).all()) for g in grads):
                for p in group['params']:
                    p.grad = None
                skipped += 1
                logger.warning(f"Non-finite gradient in parameter group {index} "
                               f"({group.get('name', 'unnamed')}), skipping its update")
        self.skipped_groups += skipped
        self.optimizer.step()
        self.steps += 1
        return skipped

    def moments(self, param: Tensor) -> Tuple[Tensor, Tensor]:
        """First and second moment buffers of one parameter"""
        state = self.optimizer.state[param]
        return state['exp_avg'], state['exp_avg_sq']

    def state_dict(self) -> Dict[str, Any]:
        return {'optimizer': self.optimizer.state_dict(), 'skipped_groups': self.skipped_groups,
                'steps': self.steps}

    def load_state_dict(self, state: Dict[str, Any]):
        self.optimizer.load_state_dict(state['optimizer'])
        self.skipped_groups = state.get('skipped_groups', 0)
        self.steps = state.get('steps', 0)


def adam_step(state: GuardedOptimizer, params: Sequence[Tensor], grads: Sequence[Tensor]) -> Sequence[Tensor]:
    """Install explicit gradients on `params` and take one guarded step"""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        if grad.shape != param.shape:
            raise ValueError(f"Gradient shape {tuple(grad.shape)} does not match parameter {tuple(param.shape)}")
        param.grad = grad.detach().clone()
    state.step()
    return params
