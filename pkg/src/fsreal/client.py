"""Client-side task execution shared by the simulator and the socket client."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .aggregation import UpdateRecord
from .compression import decode, encode
from .data import ClientShard, generate_client_shard
from .model import ModelParams, TrainConfig, frozen_layers_for, local_train, make_upload_mask
from .rng import derive_seed


@dataclass(frozen=True)
class TaskSpec:
    """Everything a client needs to rebuild its local data and train like the simulator does."""

    client_id: int
    seed: int
    n_classes: int
    dim: int
    samples_per_client: int
    dirichlet_alpha: float
    learning_rate: float
    batch_size: int
    local_epochs: int
    algorithm: str
    mode: str
    codec: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def shard(self) -> ClientShard:
        return generate_client_shard(self.client_id, self.n_classes, self.dim, self.samples_per_client,
                                     self.dirichlet_alpha, self.seed)


def train_seed(seed: int, round_index: int, client_id: int) -> int:
    return derive_seed(seed, "train", round_index, client_id)


def execute_task(spec: TaskSpec, shard: ClientShard, received: ModelParams, round_index: int):
    """Train on ``received`` and build the upload.

    Returns ``(payload, update)``: the encoded upload and the record the
    server reconstructs from it.  Sync uploads carry parameters, async
    uploads carry the delta from the received model; both only include the
    algorithm's upload layers.
    """
    cfg = TrainConfig(spec.learning_rate, spec.local_epochs, spec.batch_size,
                      train_seed(spec.seed, round_index, spec.client_id))
    local = local_train(received, shard, cfg, frozen_layers_for(spec.algorithm))
    mask = make_upload_mask(spec.algorithm)
    if spec.mode == "async":
        content = ModelParams({k: local.layers[k] - received.layers[k] for k in mask})
    else:
        content = local.subset(mask)
    payload = encode(content, spec.codec)
    update = UpdateRecord(spec.client_id, decode(payload), shard.n_samples, round_index, mask)
    return payload, update
