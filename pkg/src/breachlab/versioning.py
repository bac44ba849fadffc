"""Model versions: joint training with hidden distributions, feature
entanglement, and the on-disk version store with a retire/replace lifecycle.

A version is a classifier trained on the task data plus one hidden
distribution per label. The per-batch objective is

    mean task NLL
    + hidden_weight * (sum of hidden NLL / task batch size)
    + snnl_weight   * soft-nearest-neighbor loss on penultimate features

with hidden mini-batches sized proportionally to the hidden/task pool
ratio, so an epoch walks both pools once and the two dataset sums keep
their configured ratio. The entanglement term pools task and hidden
samples of the same assigned label into one class.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import datagen, nnet
from .datagen import HiddenAssignment
from .nnet import MlpModel, TrainConfig
from .seeding import TAG_HIDDEN_ORDER, TAG_HIDDEN_SAMPLES, child_rng, child_seed

logger = logging.getLogger(__name__)

STATUS_DEPLOYED = "deployed"
STATUS_RETIRED = "retired"

STORE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# soft nearest neighbor loss


def snnl(features: np.ndarray, labels: np.ndarray) -> float:
    """Soft-nearest-neighbor loss over a feature batch.

    For each sample i the term is -log of the ratio between the summed
    Gaussian affinities exp(-||x_i - x_j||^2) to same-label partners and
    to all other samples; the result is the mean over samples. Samples
    with no same-label partner have an empty numerator, so their term is
    excluded from the mean (and counted; see snnl_with_grad).
    """
    value, _, _ = snnl_with_grad(features, labels, need_grad=False)
    return value


def snnl_with_grad(features: np.ndarray, labels: np.ndarray, need_grad: bool = True):
    """Returns (value, grad wrt features or None, number of excluded samples)."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} samples")

    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(sq, np.inf)
    same = (y[:, None] == y[None, :])
    np.fill_diagonal(same, False)
    valid = same.any(axis=1)
    excluded = int(n - valid.sum())
    if excluded == n:
        raise ValueError("no sample has a same-label partner")
    if excluded:
        logger.debug("snnl: excluded %d partner-less sample(s)", excluded)

    # Row-wise stabilisation: scaling row i of exp(-sq) leaves both the
    # ratio and the attention weights unchanged.
    row_min = sq.min(axis=1, keepdims=True)
    e = np.exp(-(sq - row_min))
    num = np.sum(e * same, axis=1)
    den = np.sum(e, axis=1)
    ratio = np.clip(num, 1e-300, None) / den
    m = int(valid.sum())
    value = float(-np.log(ratio[valid]).sum() / m)

    if not need_grad:
        return value, None, excluded

    p = e / den[:, None]
    q = np.zeros_like(e)
    q[valid] = (e[valid] * same[valid]) / np.clip(num[valid, None], 1e-300, None)
    p[~valid] = 0.0  # dropped terms contribute neither numerator nor denominator
    a = (q - p) + (q - p).T
    grad = (2.0 / m) * (a.sum(axis=1, keepdims=True) * x - a @ x)
    return value, grad, excluded


# ---------------------------------------------------------------------------
# joint-loss training


class _JointTermHook:
    """Per-batch hidden-distribution and entanglement terms for sgd_train."""

    def __init__(self, hidden_x, hidden_y, task_size, config: TrainConfig):
        self.hx = hidden_x
        self.hy = hidden_y
        self.ratio = len(hidden_x) / task_size
        self.lam = config.hidden_weight
        self.snnl_weight = config.snnl_weight
        self.rng = child_rng(config.seed, TAG_HIDDEN_ORDER)
        self.order = np.empty(0, dtype=int)
        self.pos = 0
        self.snnl_excluded = 0

    def _next_hidden(self, k: int):
        idx = np.empty(k, dtype=int)
        filled = 0
        while filled < k:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.hx))
                self.pos = 0
            take = min(k - filled, len(self.order) - self.pos)
            idx[filled : filled + take] = self.order[self.pos : self.pos + take]
            self.pos += take
            filled += take
        return self.hx[idx], self.hy[idx]

    def __call__(self, model: MlpModel, xb, yb, tape):
        bt = len(xb)
        k = max(1, int(round(bt * self.ratio)))
        hxb, hyb = self._next_hidden(k)
        tape_h = nnet.forward_tape(model, hxb)

        extra = 0.0
        grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in nnet.model_params(model)]

        if self.lam > 0:
            logp = nnet.log_softmax(tape_h.logits)
            extra += self.lam * float(-logp[np.arange(k), hyb].sum()) / bt
            g = nnet._grad_logits(tape_h.logits, hyb, nnet.LossKind.NEG_LOG_LIKELIHOOD)
            hgrads, _ = nnet.backward(model, tape_h, self.lam * g / bt)
            for (gw, gb), (hw, hb) in zip(grads, hgrads):
                gw += hw
                gb += hb

        if self.snnl_weight > 0 and len(model.layers) >= 2:
            layer_index = len(model.layers) - 2
            feats = np.vstack([tape.acts[-2], tape_h.acts[-2]])
            labels = np.concatenate([yb, hyb])
            value, gfeat, excluded = snnl_with_grad(feats, labels)
            self.snnl_excluded += excluded
            extra += self.snnl_weight * value
            for own_tape, piece in ((tape, gfeat[:bt]), (tape_h, gfeat[bt:])):
                sgrads, _ = nnet.backward_from_activation(
                    model, own_tape, layer_index, self.snnl_weight * piece
                )
                for (gw, gb), (sw, sb) in zip(grads, sgrads):
                    gw += sw
                    gb += sb
        return extra, grads


@dataclass
class ModelVersion:
    """A trained version plus the provenance needed to reproduce it."""

    version_id: int
    model: MlpModel
    assignment: HiddenAssignment
    config: TrainConfig
    benign_accuracy: float
    status: str = STATUS_DEPLOYED


def train_version(
    task: datagen.TaskDataset,
    assignment: HiddenAssignment,
    config: TrainConfig,
    version_id: int = 1,
) -> ModelVersion:
    """Train one version on the task plus its hidden distributions.

    With hidden_weight == 0 and snnl_weight == 0 this reduces exactly to
    task-only SGD with the same seed (bit-identical parameters).
    """
    if len(assignment) != task.num_classes:
        raise ValueError(
            f"assignment covers {len(assignment)} labels, task has {task.num_classes}"
        )
    assignment.validate()
    config.validate()
    dims = (task.input_dim, *config.hidden_dims, task.num_classes)
    init = nnet.init_model(dims, seed=config.seed)

    if config.hidden_weight == 0 and config.snnl_weight == 0:
        result = nnet.sgd_train(init, task.train_x, task.train_y, config)
    else:
        hx, hy = datagen.hidden_pool(
            assignment, task.input_dim, seed=child_seed(config.seed, TAG_HIDDEN_SAMPLES)
        )
        hook = _JointTermHook(hx, hy, len(task.train_x), config)
        result = nnet.sgd_train(init, task.train_x, task.train_y, config, batch_hook=hook)
        if hook.snnl_excluded:
            logger.info(
                "version %d: %d partner-less entanglement terms excluded",
                version_id,
                hook.snnl_excluded,
            )

    acc = nnet.accuracy(result.model, task.test_x, task.test_y)
    return ModelVersion(version_id, result.model, assignment, config, acc)


# ---------------------------------------------------------------------------
# the version store
#
# Layout under the store root:
#   index.json                 {"format_version": 1,
#                               "versions": [{"id": 1, "status": "retired"}, ...]}
#   versions/<id>/model.bin    parameter dump (see nnet.save_model)
#   versions/<id>/meta.json    {"format_version", "id", "benign_accuracy",
#                               "config": {...}, "assignment": {"spread",
#                               "samples_per_label", "latents": {label: [...]}}}
#
# Version status lives only in the index so that every lifecycle change is
# one atomic file replace; meta.json is immutable once written.


class VersionStore:
    """Ordered, directory-backed collection of model versions."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._versions: list[ModelVersion] = []
        if (self.root / "index.json").exists():
            self._load()

    # -- queries

    @property
    def versions(self) -> tuple[ModelVersion, ...]:
        return tuple(self._versions)

    def deployed(self) -> ModelVersion | None:
        live = [v for v in self._versions if v.status == STATUS_DEPLOYED]
        return live[0] if live else None

    def retired(self) -> tuple[ModelVersion, ...]:
        return tuple(v for v in self._versions if v.status == STATUS_RETIRED)

    def next_id(self) -> int:
        return self._versions[-1].version_id + 1 if self._versions else 1

    # -- lifecycle

    def commit_replacement(self, version: ModelVersion) -> None:
        """Persist `version`, retire the current deployment, deploy `version`.

        Disk writes happen before any in-memory mutation; a failure leaves
        the store (index and memory) unchanged, at worst with an orphan
        version directory that the index never references.
        """
        if version.version_id != self.next_id():
            raise ValueError(
                f"version id {version.version_id} out of order, expected {self.next_id()}"
            )
        if version.status != STATUS_DEPLOYED:
            raise ValueError("new versions must be committed as deployed")
        self._write_version_dir(version)
        old = self.deployed()
        rows = [
            {"id": v.version_id, "status": STATUS_RETIRED if v is old else v.status}
            for v in self._versions
        ]
        rows.append({"id": version.version_id, "status": STATUS_DEPLOYED})
        self._write_index(rows)
        if old is not None:
            old.status = STATUS_RETIRED
        self._versions.append(version)

    # -- persistence internals

    def _version_dir(self, vid: int) -> Path:
        return self.root / "versions" / str(vid)

    def _write_version_dir(self, version: ModelVersion) -> None:
        vdir = self._version_dir(version.version_id)
        vdir.mkdir(parents=True, exist_ok=True)
        nnet.save_model(version.model, vdir / "model.bin")
        meta = {
            "format_version": STORE_FORMAT_VERSION,
            "id": version.version_id,
            "benign_accuracy": version.benign_accuracy,
            "config": _config_to_dict(version.config),
            "assignment": version.assignment.to_json_dict(),
        }
        _atomic_write_json(vdir / "meta.json", meta)

    def _write_index(self, rows: list[dict]) -> None:
        _atomic_write_json(
            self.root / "index.json",
            {"format_version": STORE_FORMAT_VERSION, "versions": rows},
        )

    def _load(self) -> None:
        index = json.loads((self.root / "index.json").read_text())
        if index.get("format_version") != STORE_FORMAT_VERSION:
            raise ValueError(f"unsupported store format {index.get('format_version')}")
        versions = []
        last_id = 0
        for row in index["versions"]:
            vid, status = int(row["id"]), row["status"]
            if vid <= last_id:
                raise ValueError(f"store index ids not strictly increasing at {vid}")
            last_id = vid
            vdir = self._version_dir(vid)
            meta = json.loads((vdir / "meta.json").read_text())
            versions.append(
                ModelVersion(
                    version_id=vid,
                    model=nnet.load_model(vdir / "model.bin"),
                    assignment=HiddenAssignment.from_json_dict(meta["assignment"]),
                    config=_config_from_dict(meta["config"]),
                    benign_accuracy=float(meta["benign_accuracy"]),
                    status=status,
                )
            )
        deployed = [v for v in versions if v.status == STATUS_DEPLOYED]
        if len(deployed) > 1:
            raise ValueError("store has more than one deployed version")
        self._versions = versions


def _config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden_dims"] = list(config.hidden_dims)
    return d


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["hidden_dims"] = tuple(d.get("hidden_dims", ()))
    return TrainConfig(**d)


def _atomic_write_json(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def retire_and_replace(
    store: VersionStore,
    task: datagen.TaskDataset,
    spread: float,
    config: TrainConfig,
    rng: np.random.Generator,
    samples_per_label: int = datagen.DEFAULT_SAMPLES_PER_LABEL,
    latent_dim: int = datagen.LATENT_DIM,
) -> ModelVersion:
    """Retire the deployed version (if any), train and deploy a fresh one.

    The new version's hidden assignment is drawn from `rng`; training is
    otherwise governed by `config`. On persistence failure the store is
    left unchanged and the error propagates.
    """
    assignment = datagen.assign_per_label(
        task.num_classes, spread, rng, samples_per_label=samples_per_label, latent_dim=latent_dim
    )
    version = train_version(task, assignment, config, version_id=store.next_id())
    store.commit_replacement(version)
    logger.info(
        "deployed version %d (benign accuracy %.3f, %d now retired)",
        version.version_id,
        version.benign_accuracy,
        len(store.retired()),
    )
    return version
