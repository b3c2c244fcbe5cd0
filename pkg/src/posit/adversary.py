"""Item-weighting adversary and the alternating POSIT training loop.

The adversary maps each item's training interaction column ``D[:, j]`` to a
raw weight ``a_j``.  With the default architecture ``"norm-tanh,norm-sigmoid"``

    a = sigmoid(n(H2 tanh(n(H1 x))))

where ``n`` standardises every unit across the item set and scales it by
``tau``.  Weights are renormalised to sum to ``|I|`` before they reach the
learner, and the adversary ascends ``-sum_j w_j * ema_j`` so that weight
flows to items with a low advantage score.

Gradients are written out by hand.  At a degenerate normalisation input
(all items equal, as with the zero-initialised first layer) the forward
output is zero and the backward pass uses unit scale, i.e. the Jacobian of
plain centring times ``tau``; otherwise a zero-initialised first layer
would never move.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import advantage as adv
from .ease import EaseModel, EaseTrainer, SGDMomentum, TrainConfig
from .exceptions import DegenerateAdversaryError, DivergenceError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12
DEFAULT_ARCH = "norm-tanh,norm-sigmoid"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda y: y * (1.0 - y)),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


def normalize(x, tau: float = 1.0, axis: int = 0):
    """``tau * (x - mean) / std`` with the population std; zeros if std < 1e-12."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    sigma = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True))
    safe = np.where(sigma < SIGMA_FLOOR, 1.0, sigma)
    return np.where(sigma < SIGMA_FLOOR, 0.0, tau * centered / safe)


def _normalize_fwd(x, tau):
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    sigma = np.sqrt(np.mean(centered * centered, axis=0, keepdims=True))
    degenerate = sigma < SIGMA_FLOOR
    scale = np.where(degenerate, 1.0, sigma)
    xhat = np.where(degenerate, 0.0, centered / scale)
    return tau * xhat, (xhat, scale)


def _normalize_bwd(dy, cache, tau):
    xhat, scale = cache
    dxhat = tau * dy
    return (dxhat - dxhat.mean(axis=0, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=0, keepdims=True)) / scale


def parse_arch(arch: str):
    """``"norm-tanh,norm-sigmoid"`` -> ``((True, "tanh"), (True, "sigmoid"))``."""
    stages = []
    for part in arch.split(","):
        tokens = part.strip().split("-")
        use_norm = tokens[0] == "norm"
        name = tokens[-1] if len(tokens) > 1 or not use_norm else "identity"
        if name not in _ACTIVATIONS or len(tokens) > 2 or (len(tokens) == 2 and not use_norm):
            raise ValueError(f"bad architecture stage {part!r}")
        stages.append((use_norm, name))
    if len(stages) != 2:
        raise ValueError("architecture needs exactly two stages (hidden, output)")
    return tuple(stages)


def item_features(train) -> sp.csr_matrix:
    """Items as rows: the transpose of the training interaction matrix."""
    X = train.data if hasattr(train, "item_ids") else sp.csr_matrix(train)
    return X.T.tocsr()


@dataclass(eq=False)
class AdversaryNet:
    W1: np.ndarray
    w2: np.ndarray
    tau: float = 1.5
    arch: str = DEFAULT_ARCH

    @classmethod
    def init(cls, n_users: int, hidden: int = 10, tau: float = 1.5,
             arch: str = DEFAULT_ARCH, seed: int = 0) -> "AdversaryNet":
        parse_arch(arch)
        rng = np.random.default_rng(seed)
        return cls(np.zeros((n_users, hidden)), rng.uniform(-0.1, 0.1, size=hidden), tau, arch)

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def params(self):
        return [self.W1, self.w2]

    def copy(self) -> "AdversaryNet":
        return AdversaryNet(self.W1.copy(), self.w2.copy(), self.tau, self.arch)


def _forward(net: AdversaryNet, features):
    (norm1, act1), (norm2, act2) = parse_arch(net.arch)
    f1, _ = _ACTIVATIONS[act1]
    f2, _ = _ACTIVATIONS[act2]
    z1 = np.asarray(features @ net.W1)
    n1, c1 = _normalize_fwd(z1, net.tau) if norm1 else (z1, None)
    h = f1(n1)
    z2 = h @ net.w2
    n2, c2 = _normalize_fwd(z2[:, None], net.tau) if norm2 else (z2[:, None], None)
    a = f2(n2[:, 0])
    return a, (features, h, c1, c2, a)


def forward(net: AdversaryNet, features) -> np.ndarray:
    """Raw per-item weights ``a_j``, statistics taken over the full item set."""
    return _forward(net, features)[0]


def normalized_weights(raw) -> np.ndarray:
    """Rescale positive raw weights so they sum to the number of items."""
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if total < 1e-12:
        raise DegenerateAdversaryError(f"raw weights sum to {total:g}")
    if np.any(raw <= 0):
        raise DegenerateAdversaryError("raw weights must be strictly positive")
    return raw.size * raw / total


def objective_and_grad(net: AdversaryNet, features, ema):
    """Adversary objective ``-sum_j w_j ema_j`` and its gradient w.r.t. (W1, w2)."""
    (norm1, act1), (norm2, act2) = parse_arch(net.arch)
    a, (F, h, c1, c2, _) = _forward(net, features)
    ema = np.asarray(ema, dtype=np.float64)
    n = a.size
    s = a.sum()
    if s < 1e-12:
        raise DegenerateAdversaryError(f"raw weights sum to {s:g}")
    w = n * a / s
    J = -float(w @ ema)

    g = -ema
    da = (n / s) * (g - (g @ a) / s)
    dn2 = da * _ACTIVATIONS[act2][1](a)
    dz2 = _normalize_bwd(dn2[:, None], c2, net.tau)[:, 0] if norm2 else dn2
    dw2 = h.T @ dz2
    dh = np.outer(dz2, net.w2)
    dn1 = dh * _ACTIVATIONS[act1][1](h)
    dz1 = _normalize_bwd(dn1, c1, net.tau) if norm1 else dn1
    dW1 = np.asarray(F.T @ dz1)
    return J, w, [dW1, dw2]


def adversary_objective(net: AdversaryNet, features, ema) -> float:
    w = normalized_weights(forward(net, features))
    return -float(w @ np.asarray(ema, dtype=np.float64))


class AdversaryTrainer:
    """Gradient ascent with momentum on the item-averaged adversary objective.

    Averaging over items (rather than summing) keeps the step size
    independent of the catalogue size.
    """

    def __init__(self, net: AdversaryNet, lr: float, momentum: float = 0.9):
        self.net = net
        self.opt = SGDMomentum(lr, momentum)

    def apply(self, grads, n_items: int, batch=None) -> None:
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError(f"non-finite adversary gradient at batch {batch}", batch=batch)
        if self.opt.lr > 0:
            self.opt.step(self.net.params(), [g / n_items for g in grads], ascent=True)

    def step(self, features, ema) -> float:
        J, w, grads = objective_and_grad(self.net, features, ema)
        self.apply(grads, w.size)
        return J


def adversary_step(net: AdversaryNet, features, ema, adv_lr: float,
                   trainer: Optional[AdversaryTrainer] = None) -> float:
    """One ascent step; returns the (summed) objective evaluated before the step."""
    trainer = trainer or AdversaryTrainer(net, adv_lr, momentum=0.0)
    return trainer.step(features, ema)


@dataclass
class PositConfig:
    ease_cfg: TrainConfig = field(default_factory=TrainConfig)
    lam: float = 8e-6
    adv_lr: float = 1.0
    adv_momentum: float = 0.9
    tau: float = 1.5
    hidden: int = 10
    k: int = 100
    m: float = 0.9
    advantage_variant: str = adv.WITH_POPULARITY
    arch: str = DEFAULT_ARCH
    select_k: int = 100
    max_nan_batches: int = 3

    def __post_init__(self):
        if self.adv_lr < 0 or self.tau <= 0 or self.hidden < 1 or self.k < 1:
            raise ValueError("adv_lr >= 0, tau > 0, hidden >= 1 and k >= 1 required")
        if not 0.0 < self.m <= 1.0:
            raise ValueError("m must lie in (0, 1]")
        if self.advantage_variant not in adv.VARIANTS:
            raise ValueError(f"unknown advantage variant {self.advantage_variant!r}")
        parse_arch(self.arch)


@dataclass
class PositResult:
    model: EaseModel
    net: AdversaryNet
    state: adv.AdvantageState
    best_epoch: int
    history: list = field(default_factory=list)


class PositTrainer:
    """Alternating learner / adversary updates over user batches.

    Per batch: estimate advantage on the batch with the current model, update
    the EMA, weight the items, take one learner step (diagonal reset), then
    one adversary ascent step.  ``hooks`` receive ``(trainer, info)`` after
    every batch; they exist for instrumentation.
    """

    def __init__(self, train, cfg: PositConfig, hooks=()):
        self.X = train.data if hasattr(train, "item_ids") else sp.csr_matrix(train)
        self.features = item_features(self.X)
        n_users, n_items = self.X.shape
        self.cfg = cfg
        self.model = EaseModel.zeros(n_items, cfg.lam)
        self.learner = EaseTrainer(self.model, cfg.ease_cfg)
        self.net = AdversaryNet.init(n_users, cfg.hidden, cfg.tau, cfg.arch, seed=cfg.ease_cfg.seed)
        self.adversary = AdversaryTrainer(self.net, cfg.adv_lr, cfg.adv_momentum)
        self.state = adv.AdvantageState.initial(n_items, cfg.m, cfg.k, cfg.advantage_variant)
        self.hooks = list(hooks)
        self._nan_streak = 0

    def batch_step(self, idx, batch_no: int):
        Xb = self.X[idx]
        R = adv.hit_matrix(self.model, Xb, self.cfg.k)
        S = adv.advantage_scores(R, Xb, self.cfg.advantage_variant)
        self.state = adv.ema_update(self.state, S)
        J, weights, grads = objective_and_grad(self.net, self.features, self.state.ema)
        loss = self.learner.step(Xb, weights, batch=batch_no)
        self.adversary.apply(grads, weights.size, batch=batch_no)
        info = {"batch": batch_no, "loss": loss, "objective": J, "weights": weights, "S": S}
        for hook in self.hooks:
            hook(self, info)
        return loss, J

    def epoch(self, epoch_no: int):
        losses, objectives = [], []
        for b, idx in enumerate(self.learner.batches(self.X.shape[0])):
            try:
                loss, J = self.batch_step(idx, b)
                self._nan_streak = 0
            except DivergenceError:
                self._nan_streak += 1
                log.warning("epoch %d batch %d diverged (%d in a row)", epoch_no, b, self._nan_streak)
                if self._nan_streak >= self.cfg.max_nan_batches:
                    raise
                continue
            losses.append(loss)
            objectives.append(J)
        self.learner.end_epoch()
        return float(np.mean(losses)), float(np.mean(objectives))


def train_posit(train, val, cfg: PositConfig, hooks=(), evaluate=None) -> PositResult:
    """Run POSIT for ``cfg.ease_cfg.epochs`` epochs and keep the best epoch.

    ``evaluate(model, split)`` scores a model on the validation split; the
    default is Recall@``cfg.select_k``.
    """
    if evaluate is None:
        from .metrics import recall_at_k

        def evaluate(model, split):
            ranked = adv.eval_ranked(model, split, cfg.select_k)
            return recall_at_k(ranked, split.heldout, cfg.select_k)

    trainer = PositTrainer(train, cfg, hooks)
    best = PositResult(trainer.model.copy(), trainer.net.copy(), trainer.state, 0)
    best_score = -np.inf
    history = []
    for epoch in range(1, cfg.ease_cfg.epochs + 1):
        loss, J = trainer.epoch(epoch)
        score = evaluate(trainer.model, val) if val is not None else float(epoch)
        history.append({"epoch": epoch, "loss": loss, "objective": J, "val": score})
        log.info("epoch %d loss %.6g objective %.6g val %.6f", epoch, loss, J, score)
        if score > best_score:
            best_score = score
            best = PositResult(trainer.model.copy(), trainer.net.copy(), trainer.state, epoch)
    best.history = history
    return best
