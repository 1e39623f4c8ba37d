"""Server round loop, client local updates, and weighted aggregation.

Each round: sample participants, broadcast the global parameters, run E
local epochs per client, aggregate by shard size. Per-client RNG streams
are derived from (seed, client_id, round), and clients are processed in
ascending id order, so results are identical no matter how client work is
scheduled. The centralized baseline runs the same training loop on the
full dataset as a single virtual client, giving R x E total epochs.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, augment_hflip
from .denoiser import Denoiser, DenoiserConfig, ParameterVector
from .diffusion import VarianceChoice, build_linear_schedule
from .optim import init_adam_state, adam_step
from .seeding import derive_rng, derive_seed


class FederationError(RuntimeError):
    """A client or round failed; no partial aggregation is performed."""


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 300
    local_epochs: int = 5
    num_clients: int = 10
    participants_per_round: int = 10
    batch_size: int = 512
    learning_rate: float = 2e-4
    timesteps: int = 300
    seed: int = 0
    variance_choice: VarianceChoice = VarianceChoice.BETA_TILDE
    eval_every: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hflip_prob: float = 0.0

    def __post_init__(self):
        if not 1 <= self.participants_per_round <= self.num_clients:
            raise ValueError(
                f"need 1 <= participants_per_round <= num_clients, got "
                f"{self.participants_per_round} vs {self.num_clients}"
            )
        if self.rounds < 1 or self.batch_size < 1 or self.timesteps < 1:
            raise ValueError("rounds, batch_size and timesteps must be >= 1")
        if self.local_epochs < 0:  # 0 is a degenerate value used in tests
            raise ValueError("local_epochs must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class RoundRecord:
    round: int
    participants: tuple
    sizes: tuple
    mean_losses: tuple
    weights: tuple
    wall_time: float
    eval: dict | None = field(default=None)

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"round {self.round}: weights sum to {sum(self.weights)}")


def aggregate(params_list, sizes) -> ParameterVector:
    """Size-weighted elementwise mean of parameter vectors.

    Accumulates in float64 and casts back to the input dtype, so every
    output element stays inside the per-coordinate [min, max] envelope.
    """
    if not params_list:
        raise ValueError("aggregate requires at least one parameter vector")
    manifest = params_list[0].manifest
    for p in params_list[1:]:
        if p.manifest != manifest:
            raise ValueError("cannot aggregate: parameter manifests differ")
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) != len(params_list):
        raise ValueError(f"{len(params_list)} vectors but {len(sizes)} sizes")
    if np.any(sizes <= 0):
        raise ValueError("shard sizes must be positive")
    weights = sizes / sizes.sum()
    acc = np.zeros(len(params_list[0].values), dtype=np.float64)
    for p, w in zip(params_list, weights):
        acc += w * p.values.astype(np.float64)
    return ParameterVector(
        values=acc.astype(params_list[0].values.dtype), manifest=manifest
    )


def sample_participants(num_clients: int, m: int, rng) -> list[int]:
    """Uniform without-replacement participant ids, sorted ascending.

    When m == num_clients all clients are returned without consuming the
    RNG, so full-participation runs do not depend on the sampling stream.
    """
    if m > num_clients:
        raise ValueError(f"cannot sample {m} of {num_clients} clients")
    if m == num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def local_update(
    images: np.ndarray,
    labels,
    theta_g: ParameterVector,
    config: FLConfig,
    denoiser: Denoiser,
    sched,
    rng,
) -> tuple[ParameterVector, float]:
    """E local epochs of Adam on one client's data, from the broadcast model.

    Per epoch the sample order is drawn with ``rng.permutation``; per batch
    the optional flip mask, then the loss draws (t, eps) follow on the same
    stream. Optimizer state is fresh for every call and the input theta_g
    is never modified. Returns the trained parameters and the mean batch
    loss (nan when local_epochs == 0).
    """
    if len(images) == 0:
        raise ValueError("local update on an empty shard")
    if theta_g.manifest != denoiser.manifest:
        raise ValueError("broadcast parameters do not match the denoiser config")
    params = theta_g.values.copy()
    state = init_adam_state(len(params), config.learning_rate, dtype=params.dtype)
    losses = []
    for _epoch in range(config.local_epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = images[idx]
            if config.hflip_prob > 0.0:
                batch = augment_hflip(batch, rng, config.hflip_prob)
            batch_labels = labels[idx] if labels is not None else None
            loss, grad = denoiser.loss_gradient(
                ParameterVector(values=params, manifest=theta_g.manifest),
                batch,
                sched,
                rng,
                labels=batch_labels,
            )
            params, state = adam_step(params, grad, state)
            losses.append(loss)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return ParameterVector(values=params, manifest=theta_g.manifest), mean_loss


def _client_data(dataset: LabeledDataset, shard, conditional: bool):
    images = dataset.images[shard.indices]
    labels = dataset.labels[shard.indices] if conditional else None
    return images, labels


def run_fl(
    config: FLConfig,
    dataset: LabeledDataset,
    shards,
    denoiser_config: DenoiserConfig,
    eval_hook=None,
    round_callback=None,
    initial_params: ParameterVector | None = None,
    start_round: int = 0,
):
    """Execute the federated round loop; returns (final params, history).

    Rounds are numbered 1..rounds. ``initial_params``/``start_round`` resume
    from a checkpoint; because all per-round RNG streams are derived from
    (seed, tag, round), a resumed run reproduces the uninterrupted one.
    """
    if len(shards) != config.num_clients:
        raise ValueError(
            f"config expects {config.num_clients} clients, got {len(shards)} shards"
        )
    sched = build_linear_schedule(config.timesteps, config.beta_start, config.beta_end)
    denoiser = Denoiser(denoiser_config)
    if initial_params is None:
        theta_g = denoiser.init_params(derive_seed(config.seed, "init"))
    else:
        theta_g = initial_params
    history = []
    for r in range(start_round + 1, config.rounds + 1):
        t0 = time.perf_counter()
        participants = sample_participants(
            config.num_clients,
            config.participants_per_round,
            derive_rng(config.seed, "participants", r),
        )
        thetas, losses, sizes = [], [], []
        for cid in participants:
            images, labels = _client_data(
                dataset, shards[cid], denoiser_config.class_conditional
            )
            try:
                theta_i, loss = local_update(
                    images,
                    labels,
                    theta_g,
                    config,
                    denoiser,
                    sched,
                    derive_rng(config.seed, "client", cid, r),
                )
            except Exception as e:
                raise FederationError(
                    f"client {cid} failed in round {r}: {e}"
                ) from e
            thetas.append(theta_i)
            losses.append(loss)
            sizes.append(len(shards[cid]))
        theta_g = aggregate(thetas, sizes)
        weights = tuple(np.asarray(sizes, dtype=np.float64) / sum(sizes))
        record = RoundRecord(
            round=r,
            participants=tuple(participants),
            sizes=tuple(sizes),
            mean_losses=tuple(losses),
            weights=weights,
            wall_time=time.perf_counter() - t0,
        )
        if eval_hook is not None and r % config.eval_every == 0:
            record.eval = eval_hook(r, theta_g)
        history.append(record)
        if round_callback is not None:
            round_callback(r, theta_g, record)
    return theta_g, history


def run_centralized(
    dataset: LabeledDataset,
    config: FLConfig,
    denoiser_config: DenoiserConfig,
    eval_hook=None,
    round_callback=None,
    initial_params: ParameterVector | None = None,
    start_round: int = 0,
):
    """Train on the full dataset for rounds x local_epochs total epochs.

    Structured as `rounds` blocks of `local_epochs` epochs with a fresh
    optimizer per block and the same seeding scheme as a single federated
    client, so the compute budget and RNG streams line up with run_fl for
    like-for-like comparison. Logging schema matches run_fl.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    sched = build_linear_schedule(config.timesteps, config.beta_start, config.beta_end)
    denoiser = Denoiser(denoiser_config)
    if initial_params is None:
        theta = denoiser.init_params(derive_seed(config.seed, "init"))
    else:
        theta = initial_params
    labels = dataset.labels if denoiser_config.class_conditional else None
    history = []
    for r in range(start_round + 1, config.rounds + 1):
        t0 = time.perf_counter()
        theta, loss = local_update(
            dataset.images,
            labels,
            theta,
            config,
            denoiser,
            sched,
            derive_rng(config.seed, "client", 0, r),
        )
        record = RoundRecord(
            round=r,
            participants=(0,),
            sizes=(len(dataset),),
            mean_losses=(loss,),
            weights=(1.0,),
            wall_time=time.perf_counter() - t0,
        )
        if eval_hook is not None and r % config.eval_every == 0:
            record.eval = eval_hook(r, theta)
        history.append(record)
        if round_callback is not None:
            round_callback(r, theta, record)
    return theta, history


# --- history export ------------------------------------------------------

METRICS_COLUMNS = (
    "round",
    "participants",
    "sizes",
    "weights",
    "mean_losses",
    "is_mean",
    "is_std",
    "fid_train",
    "fid_test",
    "n_samples",
    "backend_id",
)

_EVAL_KEYS = ("is_mean", "is_std", "fid_train", "fid_test", "n_samples", "backend_id")


def record_to_row(record: RoundRecord) -> list[str]:
    """Deterministic CSV row (wall time is deliberately excluded)."""
    row = [
        str(record.round),
        ";".join(str(p) for p in record.participants),
        ";".join(str(s) for s in record.sizes),
        ";".join(repr(float(w)) for w in record.weights),
        ";".join(repr(float(l)) for l in record.mean_losses),
    ]
    ev = record.eval or {}
    for key in _EVAL_KEYS:
        v = ev.get(key, "")
        row.append(repr(float(v)) if isinstance(v, float) else str(v))
    return row


def write_history_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for record in records:
            f.write(",".join(record_to_row(record)) + "\n")
