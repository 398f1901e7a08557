"""Loss, gradients and the Adam training loop for the dynamics model.

Gradients are reverse-mode through the full message-passing step, written
by hand against the forward pass in :mod:`gnnmpc.gnn`. Training is
deterministic for a fixed seed: parameter init, batch shuffling and the
within-batch summation order are all pinned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .gnn import GnnModel, Normalization, _edge_index, _forward_parts, init_model
from .graph import GraphTopology
from .mlp import mlp_backward, mlp_forward_cached


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    lr_decay_factor: float = 0.5
    max_lr_decays: int = 3
    l2_lambda: float = 1e-6
    state_weights: np.ndarray | None = None  # diagonal of O; scalar, (n_state,) or (M*n_state,)
    rng_seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be nonnegative")
        if self.state_weights is not None:
            w = np.atleast_1d(np.asarray(self.state_weights, dtype=float))
            if np.any(w < 0):
                raise ValueError("state weights must be nonnegative")
            self.state_weights = w


def _weight_grid(config_weights, node_count: int, n_state: int) -> np.ndarray:
    """Expand the diagonal of O to an (M, n_state) grid."""
    if config_weights is None:
        return np.ones((node_count, n_state))
    w = np.atleast_1d(np.asarray(config_weights, dtype=float))
    if w.size == 1:
        return np.full((node_count, n_state), w[0])
    if w.size == n_state:
        return np.tile(w, (node_count, 1))
    if w.size == node_count * n_state:
        return w.reshape(node_count, n_state)
    raise ValueError("state weights must be scalar, per-feature or per-component")


def _predict(model: GnnModel, topo: GraphTopology, X: np.ndarray, U: np.ndarray):
    e_feat, agg, z, dv = _forward_parts(model, topo, X, U)
    n_p = model.n_p
    v_new = X[..., n_p:] + dv
    p_new = X[..., :n_p] + model.dt * v_new
    pred = np.concatenate([p_new, v_new], axis=-1)
    return pred, (e_feat, z)


def prediction_mse(model: GnnModel, topo: GraphTopology, dataset: Dataset, weights=None, mask=None) -> float:
    """Mean O-weighted squared one-step prediction error (no regularizer)."""
    X, U, Xn = dataset.x, dataset.u, dataset.x_next
    if mask is not None:
        X, U, Xn = X[mask], U[mask], Xn[mask]
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    W = _weight_grid(weights, X.shape[1], X.shape[2])
    pred, _ = _predict(model, topo, X, U)
    r = pred - Xn
    return float(np.sum(W * r * r) / X.shape[0])


def loss(model: GnnModel, topo: GraphTopology, dataset: Dataset, config: TrainConfig, mask=None) -> float:
    """Training objective: mean weighted squared error plus l2 penalty."""
    mse = prediction_mse(model, topo, dataset, config.state_weights, mask)
    reg = config.l2_lambda * (model.psi.param_sq_norm() + model.phi.param_sq_norm())
    return mse + reg


def _params(model: GnnModel) -> list[np.ndarray]:
    return model.psi.weights + model.psi.biases + model.phi.weights + model.phi.biases


def loss_gradients(
    model: GnnModel, topo: GraphTopology, X: np.ndarray, U: np.ndarray, Xn: np.ndarray,
    weights: np.ndarray, l2_lambda: float,
) -> tuple[float, list[np.ndarray]]:
    """Batch loss value and its gradient w.r.t. every parameter.

    Gradient order matches :func:`_params`.
    """
    B = X.shape[0]
    n_p = model.n_p
    norm = model.normalization
    dst, src, gather = _edge_index(topo)
    E = len(dst)

    H = (X - norm.state_mean) / norm.state_scale
    e_feat = (X[..., dst, :] - X[..., src, :]) / norm.state_scale
    if E > 0:
        msg, psi_cache = mlp_forward_cached(model.psi, e_feat)
        pad = np.zeros(msg.shape[:-2] + (1, model.n_m))
        agg = np.concatenate([msg, pad], axis=-2)[..., gather, :].sum(axis=-2)
    else:
        agg = np.zeros(X.shape[:-1] + (model.n_m,))
    Un = (U - norm.input_mean) / norm.input_scale
    Ub = np.broadcast_to(Un[..., None, :], X.shape[:-1] + (model.n_u,)).copy()
    z = np.concatenate([H, agg, Ub], axis=-1)
    dv, phi_cache = mlp_forward_cached(model.phi, z)
    v_new = X[..., n_p:] + dv
    p_new = X[..., :n_p] + model.dt * v_new
    pred = np.concatenate([p_new, v_new], axis=-1)

    r = pred - Xn
    batch_loss = float(np.sum(weights * r * r) / B)
    g_pred = 2.0 * weights * r / B
    # p' = p + dt*v' folds the position error into the velocity channel
    g_dv = g_pred[..., n_p:] + model.dt * g_pred[..., :n_p]

    gw_phi, gb_phi, g_z = mlp_backward(model.phi, phi_cache, g_dv)
    if E > 0:
        nx = X.shape[-1]
        g_agg = g_z[..., nx : nx + model.n_m]
        g_msg = g_agg[..., dst, :]
        gw_psi, gb_psi, _ = mlp_backward(model.psi, psi_cache, g_msg)
    else:
        gw_psi = [np.zeros_like(W) for W in model.psi.weights]
        gb_psi = [np.zeros_like(b) for b in model.psi.biases]

    grads = gw_psi + gb_psi + gw_phi + gb_phi
    if l2_lambda > 0:
        params = _params(model)
        grads = [g + 2.0 * l2_lambda * p for g, p in zip(grads, params)]
        batch_loss += l2_lambda * sum(float(np.sum(p * p)) for p in params)
    return batch_loss, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def update(self, params, grads, lr, beta1, beta2, eps):
        self.t += 1
        bc1 = 1.0 - beta1**self.t
        bc2 = 1.0 - beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def train(
    model: GnnModel,
    topo: GraphTopology,
    dataset: Dataset,
    config: TrainConfig,
) -> tuple[GnnModel, list[EpochRecord]]:
    """Adam with patience-based learning-rate halving.

    Keeps the parameters with the best validation loss (train-split loss
    stands in when the dataset has no validation trajectories). Training
    stops at max_epochs or after the learning rate has been cut
    `max_lr_decays` times and patience runs out once more.
    """
    model = model.copy()
    rng = np.random.default_rng(config.rng_seed)
    W = _weight_grid(config.state_weights, dataset.node_count, dataset.x.shape[2])

    train_idx = np.flatnonzero(dataset.train_mask)
    val_idx = np.flatnonzero(dataset.val_mask)
    if train_idx.size == 0:
        raise ValueError("dataset has no training records")
    monitor_val = val_idx.size > 0

    params = _params(model)
    adam = AdamState.init_like(params)
    lr = config.learning_rate
    best_val = np.inf
    best_params = [p.copy() for p in params]
    epochs_since_improvement = 0
    n_decays = 0
    history: list[EpochRecord] = []

    for epoch in range(config.max_epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_loss, grads = loss_gradients(
                model, topo, dataset.x[idx], dataset.u[idx], dataset.x_next[idx],
                W, config.l2_lambda,
            )
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, record offset {start}, lr {lr:g}"
                )
            adam.update(params, grads, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)

        train_loss = loss(model, topo, dataset, config, mask=train_idx)
        val_loss = (
            prediction_mse(model, topo, dataset, config.state_weights, mask=val_idx)
            if monitor_val
            else train_loss
        )
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged(f"non-finite epoch loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))

        if val_loss < best_val * (1.0 - 1e-12):
            best_val = val_loss
            best_params = [p.copy() for p in params]
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement > config.patience:
                if n_decays >= config.max_lr_decays:
                    break
                lr *= config.lr_decay_factor
                n_decays += 1
                epochs_since_improvement = 0

    for p, bp in zip(params, best_params):
        p[...] = bp
    return model, history


def model_for_dataset(
    dataset: Dataset,
    rng: np.random.Generator,
    n_m: int = 16,
    psi_hidden: tuple[int, ...] = (32, 32),
    phi_hidden: tuple[int, ...] = (64, 64),
) -> GnnModel:
    """Fresh model wired to the dataset's dimensions and statistics.

    The output layer is scaled to the typical velocity increment so the
    first epochs start near the right magnitude.
    """
    n_state = dataset.x.shape[2]
    n_p = n_state // 2
    n_u = dataset.u.shape[1]
    s = dataset.stats
    norm = Normalization(s.state_mean, s.state_scale, s.input_mean, s.input_scale)
    out_scale = float(np.median(s.target_scale))
    model = init_model(
        n_p, n_u, dataset.dt, rng, n_m=n_m, psi_hidden=psi_hidden, phi_hidden=phi_hidden,
        normalization=norm, out_scale=out_scale,
    )
    model.phi.biases[-1][...] = s.target_mean
    return model
