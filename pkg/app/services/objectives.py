"""Synthetic federated tasks and their gradient oracles.

Two task kinds are supported:

* heterogeneous least-squares quadratics, f_k(w) = ½‖A_k w − b_k‖² + (λ/2)‖w‖²,
  whose smoothness and dissimilarity constants are available in closed form;
* logistic regression on Gaussian blobs whose labels are split across clients
  with a Dirichlet(γ) prior.

Every client objective is the mean of per-sample losses, so sampling rows
uniformly with replacement gives an unbiased stochastic gradient.
"""
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import expit

from app.constants import POWER_ITERATION_MAX_STEPS, POWER_ITERATION_TOL, Purpose, QuadraticPreset, TaskKind
from app.core.errors import ConfigError, DomainError, NumericError
from app.models.models import ClientObjective, DissimilarityEstimate, FederatedTask
from app.schemas.experiment import PartitionStats, TaskSpec
from app.services.numerics import RandomStream, norm2_sq, ordered_sum

logger = logging.getLogger(__name__)

# ν² and β² are certified against h·(1 + margin) to absorb rounding in h and g
DISSIMILARITY_MARGIN = 1e-9


# ---------------------------------------------------------------------------
# Gradient and value oracles
# ---------------------------------------------------------------------------

def _client(task: FederatedTask, k: int) -> ClientObjective:
    if not 0 <= k < task.K:
        raise DomainError(f"client index {k} outside [0, {task.K})")
    client = task.clients[k]
    if client.n == 0:
        raise ConfigError(f"client {k} has an empty dataset", field="task")
    return client


def batch_grad(task: FederatedTask, k: int, w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Mean per-sample gradient over `rows` (duplicates allowed) plus weight decay."""
    client = _client(task, k)
    X = client.features[rows]
    y = client.targets[rows]
    if client.kind == TaskKind.QUADRATIC:
        # per-sample loss is (n/2)(aᵀw − b)²
        g = (client.n / len(rows)) * (X.T @ (X @ w - y))
    else:
        g = X.T @ (expit(X @ w) - y) / len(rows)
    return g + task.weight_decay * w


def full_grad(task: FederatedTask, k: int, w: np.ndarray) -> np.ndarray:
    client = _client(task, k)
    A, b = client.features, client.targets
    if client.kind == TaskKind.QUADRATIC:
        g = A.T @ (A @ w - b)
    else:
        g = A.T @ (expit(A @ w) - b) / client.n
    return g + task.weight_decay * w


def stochastic_grad(
    task: FederatedTask, k: int, w: np.ndarray, batch_size: int, stream: RandomStream
) -> np.ndarray:
    """Unbiased estimate of ∇f_k(w).

    A batch covering the whole local dataset is a deterministic full pass;
    smaller batches draw rows uniformly with replacement from `stream`.
    """
    client = _client(task, k)
    if not 1 <= batch_size <= client.n:
        raise DomainError(f"batch_size must lie in [1, {client.n}] for client {k}, got {batch_size}")
    if batch_size == client.n:
        return full_grad(task, k, w)
    rows = stream.generator().integers(0, client.n, size=batch_size)
    return batch_grad(task, k, w, rows)


def client_value(task: FederatedTask, k: int, w: np.ndarray) -> float:
    client = _client(task, k)
    A, b = client.features, client.targets
    if client.kind == TaskKind.QUADRATIC:
        value = 0.5 * norm2_sq(A @ w - b)
    else:
        z = A @ w
        value = float(np.mean(np.logaddexp(0.0, z) - b * z))
    return value + 0.5 * task.weight_decay * norm2_sq(w)


def objective(task: FederatedTask, w: np.ndarray) -> float:
    """f(w) = (1/K) Σ_k f_k(w)."""
    return sum(client_value(task, k, w) for k in range(task.K)) / task.K


def global_grad(task: FederatedTask, w: np.ndarray) -> np.ndarray:
    return ordered_sum(full_grad(task, k, w) for k in range(task.K)) / task.K


# ---------------------------------------------------------------------------
# Constants L, β², ν², σ²
# ---------------------------------------------------------------------------

def _curvature_matrix(client: ClientObjective) -> np.ndarray:
    A = client.features
    if client.kind == TaskKind.QUADRATIC:
        return A.T @ A
    # the logistic Hessian is bounded by XᵀX / (4n)
    return A.T @ A / (4.0 * client.n)


def power_iteration(M: np.ndarray, stream: RandomStream) -> float:
    """λ_max of a symmetric PSD matrix, to relative tolerance POWER_ITERATION_TOL."""
    v = stream.generator().standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(POWER_ITERATION_MAX_STEPS):
        Mv = M @ v
        norm = np.linalg.norm(Mv)
        if norm == 0.0:
            return 0.0
        current = float(v @ Mv)
        v = Mv / norm
        if abs(current - estimate) <= POWER_ITERATION_TOL * abs(current):
            return current
        estimate = current
    raise NumericError(f"power iteration did not converge in {POWER_ITERATION_MAX_STEPS} steps")


def client_smoothness(task: FederatedTask, k: int, seed: int = 0) -> float:
    client = _client(task, k)
    stream = RandomStream(seed, client=k, purpose=Purpose.POWER_ITERATION)
    lam = power_iteration(_curvature_matrix(client), stream)
    # inflate by the tolerance so the returned value stays an upper bound
    return lam * (1.0 + POWER_ITERATION_TOL) + task.weight_decay


def smoothness_constant(task: FederatedTask, seed: int = 0) -> float:
    """Global L = max_k L_k."""
    L = max(client_smoothness(task, k, seed) for k in range(task.K))
    logger.debug(f"smoothness constant L={L:.6g} over {task.K} clients")
    return L


def client_minimizer(task: FederatedTask, k: int) -> np.ndarray:
    client = _client(task, k)
    if client.kind == TaskKind.QUADRATIC:
        ridge = np.sqrt(task.weight_decay) * np.eye(task.dim)
        A = np.vstack([client.features, ridge])
        b = np.concatenate([client.targets, np.zeros(task.dim)])
        return np.linalg.lstsq(A, b, rcond=None)[0]
    result = minimize(
        lambda w: (client_value(task, k, w), full_grad(task, k, w)),
        np.zeros(task.dim),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 200},
    )
    return result.x


def global_minimum(task: FederatedTask) -> Tuple[np.ndarray, float]:
    """(w⋆, f⋆): exact least squares for quadratics, L-BFGS for logistic."""
    if task.kind == TaskKind.QUADRATIC:
        ridge = np.sqrt(task.K * task.weight_decay) * np.eye(task.dim)
        A = np.vstack([c.features for c in task.clients] + [ridge])
        b = np.concatenate([c.targets for c in task.clients] + [np.zeros(task.dim)])
        w_star = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        result = minimize(
            lambda w: (objective(task, w), global_grad(task, w)),
            np.zeros(task.dim),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 1000, "gtol": 1e-10},
        )
        w_star = result.x
    return w_star, objective(task, w_star)


def _probe_points(task: FederatedTask, probes: int, stream: RandomStream, radius: float) -> List[np.ndarray]:
    centers = [client_minimizer(task, k) for k in range(task.K)]
    points = []
    for i in range(probes):
        noise = stream.at(step=i).generator().standard_normal(task.dim)
        # first half around the origin, second half around client minimizers
        center = np.zeros(task.dim) if i < (probes + 1) // 2 else centers[i % task.K]
        points.append(center + radius * noise)
    return points


def dissimilarity_pairs(task: FederatedTask, points: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """(g, h) = (‖∇f(x)‖², (1/K)Σ‖∇f_k(x)‖²) at every point."""
    g, h = [], []
    for x in points:
        grads = [full_grad(task, k, x) for k in range(task.K)]
        g.append(norm2_sq(ordered_sum(grads) / task.K))
        h.append(sum(norm2_sq(v) for v in grads) / task.K)
    return np.array(g), np.array(h)


def max_violation(beta_sq: float, nu_sq: float, g: np.ndarray, h: np.ndarray) -> float:
    return float(np.max(h - beta_sq * g - nu_sq))


def estimate_dissimilarity(
    task: FederatedTask, probes: int, stream: RandomStream, radius: float = 1.0
) -> DissimilarityEstimate:
    """Fit the smallest-area envelope h ≤ β²g + ν² over probe points.

    The envelope is the line minimising ∫₀^G (β²g + ν²) dg over the observed
    range, subject to every probe lying under it; it touches the upper convex
    hull of the (g, h) cloud.
    """
    if probes < 10:
        raise DomainError(f"probes must be >= 10, got {probes}")
    stream = stream.at(purpose=Purpose.DISSIMILARITY)
    g, h = dissimilarity_pairs(task, _probe_points(task, probes, stream, radius))
    target = h * (1.0 + DISSIMILARITY_MARGIN)
    G = max(float(g.max()), 1.0)
    result = linprog(
        c=[G * G / 2.0, G],
        A_ub=np.column_stack([-g, -np.ones_like(g)]),
        b_ub=-target,
        bounds=[(1.0, None), (0.0, None)],
        method="highs",
    )
    if not result.success:
        raise NumericError(f"dissimilarity fit failed: {result.message}")
    beta_sq, nu_sq = float(result.x[0]), float(result.x[1])
    # the solver honours constraints only up to its own tolerance
    slack = max_violation(beta_sq, nu_sq, g, target)
    if slack > 0:
        nu_sq += slack
    estimate = DissimilarityEstimate(
        beta_sq=beta_sq,
        nu_sq=nu_sq,
        probe_count=probes,
        max_violation=max_violation(beta_sq, nu_sq, g, h),
    )
    logger.info(f"dissimilarity fit beta_sq={beta_sq:.6g} nu_sq={nu_sq:.6g} on {probes} probes")
    return estimate


def estimate_noise(
    task: FederatedTask,
    w: np.ndarray,
    batch_size: int,
    samples: int,
    stream: RandomStream,
    clients: Optional[Sequence[int]] = None,
) -> float:
    """σ² = max_k E‖stochastic_grad − ∇f_k‖² by Monte-Carlo, over `clients` (default all)."""
    if samples < 100:
        raise DomainError(f"samples must be >= 100, got {samples}")
    sigma_sq = 0.0
    for k in (range(task.K) if clients is None else clients):
        b = min(batch_size, task.clients[k].n)
        if b == task.clients[k].n:
            continue
        exact = full_grad(task, k, w)
        base = stream.at(client=k, purpose=Purpose.NOISE)
        total = sum(
            norm2_sq(stochastic_grad(task, k, w, b, base.at(replica=s)) - exact) for s in range(samples)
        )
        sigma_sq = max(sigma_sq, total / samples)
    return sigma_sq


# ---------------------------------------------------------------------------
# Task construction
# ---------------------------------------------------------------------------

def make_quadratic_task(spec: TaskSpec, stream: RandomStream) -> FederatedTask:
    d, K = spec.dim, spec.clients
    if spec.preset == QuadraticPreset.SHIFTED_IDENTITY:
        clients = []
        for k in range(K):
            b = np.zeros(d)
            b[0] = spec.heterogeneity if k % 2 == 0 else -spec.heterogeneity
            clients.append(ClientObjective(TaskKind.QUADRATIC, np.eye(d), b))
        return FederatedTask(tuple(clients), d, spec.weight_decay)

    n = spec.samples_per_client
    shared = stream.at(client=K).generator().standard_normal(d)
    clients = []
    for k in range(K):
        rng = stream.at(client=k).generator()
        A = rng.standard_normal((n, d)) / np.sqrt(n)
        planted = shared + spec.heterogeneity * rng.standard_normal(d)
        b = A @ planted + spec.label_noise * rng.standard_normal(n) / np.sqrt(n)
        clients.append(ClientObjective(TaskKind.QUADRATIC, A, b))
    return FederatedTask(tuple(clients), d, spec.weight_decay)


def dirichlet_split(
    labels: np.ndarray, K: int, gamma: float, stream: RandomStream, min_per_client: int = 0
) -> List[np.ndarray]:
    """Split sample indices across K clients, class by class, with Dirichlet(γ) shares.

    With `min_per_client` > 0, each client is first dealt that many samples drawn
    uniformly without replacement; only the remainder is split by Dirichlet shares.
    """
    if min_per_client * K > len(labels):
        raise ConfigError(f"{len(labels)} samples cannot give {K} clients {min_per_client} each")
    rng = stream.generator()
    order = rng.permutation(len(labels))
    dealt = min_per_client * K
    parts: List[List[int]] = [order[k * min_per_client:(k + 1) * min_per_client].tolist() for k in range(K)]
    remaining = np.zeros(len(labels), dtype=bool)
    remaining[order[dealt:]] = True
    for cls in np.unique(labels):
        idx = np.flatnonzero((labels == cls) & remaining)
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(K, gamma))
        cuts = (np.cumsum(shares) * len(idx)).astype(int)[:-1]
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].extend(chunk.tolist())
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


def make_dirichlet_task(
    classes: int,
    K: int,
    gamma: float,
    per_class: int,
    d: int,
    stream: RandomStream,
    separation: float = 3.0,
    weight_decay: float = 0.0,
) -> FederatedTask:
    """Gaussian blobs per class, labels split over clients with Dirichlet(γ) shares.

    Every client is dealt one sample up front; the rest follow the Dirichlet shares.
    Binary labels are class index mod 2.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}", field="task.dirichlet_gamma")
    if K < 1:
        raise ConfigError(f"need at least one client, got {K}", field="task.clients")
    if per_class * classes < K:
        raise ConfigError(f"{per_class}*{classes} samples cannot cover {K} clients", field="task.per_class")

    rng = stream.at(purpose=Purpose.TASK).generator()
    directions = rng.standard_normal((classes, d))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    X = means[labels] + rng.standard_normal((classes * per_class, d))

    parts = dirichlet_split(labels, K, gamma, stream.at(purpose=Purpose.PARTITION), min_per_client=1)

    clients = tuple(
        ClientObjective(
            TaskKind.LOGISTIC,
            X[p],
            (labels[p] % 2).astype(np.float64),
            class_labels=labels[p],
        )
        for p in parts
    )
    return FederatedTask(clients, d, weight_decay, classes)


def build_task(spec: TaskSpec, seed: int) -> FederatedTask:
    stream = RandomStream(seed, purpose=Purpose.TASK)
    if spec.kind == TaskKind.QUADRATIC:
        task = make_quadratic_task(spec, stream)
    else:
        task = make_dirichlet_task(
            spec.classes,
            spec.clients,
            spec.dirichlet_gamma,
            spec.per_class,
            spec.dim,
            stream,
            separation=spec.separation,
            weight_decay=spec.weight_decay,
        )
    logger.info(f"Built {spec.kind.value} task: K={task.K} d={task.dim}")
    return task


def partition_stats(task: FederatedTask) -> PartitionStats:
    if task.classes < 1 or any(c.class_labels is None for c in task.clients):
        raise ConfigError("partition statistics need a Dirichlet-partitioned task", field="task.kind")
    hist = np.array([np.bincount(c.class_labels, minlength=task.classes) for c in task.clients])
    global_mix = hist.sum(axis=0) / hist.sum()
    shares = hist / hist.sum(axis=1, keepdims=True)
    majority = shares.max(axis=1)
    tv = 0.5 * np.abs(shares - global_mix).sum(axis=1)
    return PartitionStats(
        clients=task.K,
        classes=task.classes,
        histograms=hist.tolist(),
        majority_share=majority.tolist(),
        total_variation=tv.tolist(),
        median_majority_share=float(np.median(majority)),
        mean_total_variation=float(np.mean(tv)),
    )


# ---------------------------------------------------------------------------
# Dump / load
# ---------------------------------------------------------------------------

def dump_task(task: FederatedTask, path: Path) -> None:
    """Write the task as JSON: matrices row-major, labels as integers."""
    doc = {
        "kind": task.kind.value,
        "dim": task.dim,
        "weight_decay": task.weight_decay,
        "classes": task.classes,
        "clients": [
            {
                "features": c.features.tolist(),
                "targets": c.targets.tolist(),
                "class_labels": None if c.class_labels is None else c.class_labels.tolist(),
            }
            for c in task.clients
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_task(path: Path) -> FederatedTask:
    doc = json.loads(Path(path).read_text())
    kind = TaskKind(doc["kind"])
    dim = int(doc["dim"])
    clients = []
    for i, c in enumerate(doc["clients"]):
        features = np.array(c["features"], dtype=np.float64).reshape(-1, dim)
        targets = np.array(c["targets"], dtype=np.float64)
        if features.shape[0] != targets.shape[0]:
            raise ConfigError(f"client {i}: {features.shape[0]} rows but {targets.shape[0]} targets")
        labels: Optional[np.ndarray] = None
        if c.get("class_labels") is not None:
            labels = np.array(c["class_labels"], dtype=np.int64)
        clients.append(ClientObjective(kind, features, targets, class_labels=labels))
    return FederatedTask(tuple(clients), dim, float(doc["weight_decay"]), int(doc.get("classes", 0)))
