"""Small MLP domain-adaptation network trained in two alternating stages.

Stage 1 freezes the feature extractor and trains the pose regressor on annotated
samples and the domain mixer to tell synthetic (0) from real (1). Stage 2 freezes
the mixer and trains extractor and regressor so the mixer outputs 0.5 for every sample.
"""
import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import ValidationError
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from app.schemas.pipeline import TrainConfig
from app.schemas.render import AnnotationRecord
from app.schemas.training import CheckpointFile, LayerState, NetState
from app.utils.errors import AssetError, InvalidInputError, SynthError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
PROB_EPS = 1e-7
POSE_DIM = 45
SYNTHETIC, REAL = 0, 1


@dataclass
class Tensor:
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def check_finite(self, name: str) -> None:
        if not np.all(np.isfinite(self.value)) or not np.all(np.isfinite(self.grad)):
            raise SynthError(f"non-finite values in {name}")


def _leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MlpNet:
    """Affine layers with leaky-rectifier hidden activations.

    Weights are (out, in); a layer computes ``x @ W.T + b``. The last layer applies
    ``output`` ("linear", "leaky" or "sigmoid").
    """

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None, output: str = "linear"):
        if len(sizes) < 2:
            raise InvalidInputError("an MLP needs at least one layer")
        if output not in ("linear", "leaky", "sigmoid"):
            raise InvalidInputError(f"unknown output activation '{output}'")
        self.sizes = [int(s) for s in sizes]
        self.output = output
        rng = rng or np.random.default_rng(0)
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))))
            self.biases.append(Tensor(np.zeros(n_out)))
        self._inputs: List[np.ndarray] = []
        self._pre: List[np.ndarray] = []

    def parameters(self) -> List[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _activation(self, k: int) -> str:
        return self.output if k == len(self.weights) - 1 else "leaky"

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise InvalidInputError(f"expected input of shape (n, {self.sizes[0]}), got {x.shape}")
        self._inputs, self._pre = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self._inputs.append(x)
            z = x @ w.value.T + b.value
            self._pre.append(z)
            act = self._activation(k)
            x = _leaky(z) if act == "leaky" else _sigmoid(z) if act == "sigmoid" else z
        return x

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last forward call; returns the input gradient."""
        if not self._inputs:
            raise InvalidInputError("backward called before forward")
        grad = np.asarray(grad_y, dtype=np.float64)
        if grad.shape != self._pre[-1].shape:
            raise InvalidInputError(f"gradient shape {grad.shape} does not match output {self._pre[-1].shape}")
        for k in reversed(range(len(self.weights))):
            z = self._pre[k]
            act = self._activation(k)
            if act == "leaky":
                grad = grad * np.where(z > 0, 1.0, LEAKY_SLOPE)
            elif act == "sigmoid":
                s = _sigmoid(z)
                grad = grad * s * (1.0 - s)
            self.weights[k].grad += grad.T @ self._inputs[k]
            self.biases[k].grad += grad.sum(axis=0)
            grad = grad @ self.weights[k].value
        return grad

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p.value).tobytes())
        return digest.hexdigest()

    def to_state(self) -> NetState:
        return NetState(
            sizes=self.sizes,
            output=self.output,
            layers=[LayerState(weight=w.value.ravel().tolist(), bias=b.value.tolist())
                    for w, b in zip(self.weights, self.biases)],
        )

    @classmethod
    def from_state(cls, state: NetState) -> "MlpNet":
        net = cls(state.sizes, output=state.output)
        for k, layer in enumerate(state.layers):
            net.weights[k] = Tensor(np.array(layer.weight).reshape(state.sizes[k + 1], state.sizes[k]))
            net.biases[k] = Tensor(np.array(layer.bias))
        return net


def loss_reg(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum of per-sample Euclidean errors over annotated samples; the gradient of the norm at 0 is 0."""
    mask = np.asarray(mask, dtype=bool)
    diff = np.where(mask[:, None], pred - np.nan_to_num(np.asarray(target, dtype=np.float64)), 0.0)
    norms = np.linalg.norm(diff, axis=1)
    grad = np.where(norms[:, None] > 0, diff / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    return float(norms.sum()), grad


def _clamped(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return pc, (p > PROB_EPS) & (p < 1.0 - PROB_EPS)


def loss_domain_stage1(p: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy of the mixer against the true domain labels."""
    labels = np.asarray(labels, dtype=np.float64)
    pc, free = _clamped(p)
    loss = -np.sum(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))
    grad = np.where(free, -(labels / pc - (1.0 - labels) / (1.0 - pc)), 0.0)
    return float(loss), grad


def loss_domain_stage2(p: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cross-entropy against the constant (0.5, 0.5) target; minimal at p = 0.5."""
    pc, free = _clamped(p)
    loss = -np.sum(0.5 * np.log(pc) + 0.5 * np.log(1.0 - pc))
    grad = np.where(free, -(0.5 / pc - 0.5 / (1.0 - pc)), 0.0)
    return float(loss), grad


def loss_domain_reversal(p: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Negated stage-1 loss, the gradient-reversal objective."""
    loss, grad = loss_domain_stage1(p, labels)
    return -loss, -grad


def total_loss(reg: float, domain: float, lambda_domain: float = 1.0) -> float:
    return float(reg + lambda_domain * domain)


class SGD:
    """Momentum SGD: v <- mu v - lr g; p <- p + v."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float, momentum: float = 0.9):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= self.learning_rate * p.grad
            p.value += v


@dataclass
class AdaptationNets:
    extractor: MlpNet
    regressor: MlpNet
    mixer: MlpNet

    @classmethod
    def create(cls, input_dim: int, config: TrainConfig, rng: np.random.Generator, pose_dim: int = POSE_DIM):
        hidden = list(config.hidden)
        return cls(
            extractor=MlpNet([input_dim, *hidden, config.feature_dim], rng, output="leaky"),
            regressor=MlpNet([config.feature_dim, pose_dim], rng, output="linear"),
            mixer=MlpNet([config.feature_dim, *hidden, 1], rng, output="sigmoid"),
        )

    def components(self) -> Dict[str, MlpNet]:
        return {"extractor": self.extractor, "regressor": self.regressor, "mixer": self.mixer}

    def checksum(self) -> Dict[str, str]:
        return {name: net.checksum() for name, net in self.components().items()}

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.extractor.forward(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.regressor.forward(self.extractor.forward(x))

    def domain_probability(self, x: np.ndarray) -> np.ndarray:
        return self.mixer.forward(self.extractor.forward(x))[:, 0]


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray     # NaN rows where unannotated
    domains: np.ndarray     # 0 synthetic, 1 real
    mask: np.ndarray        # True where a target is present

    def __post_init__(self):
        if not np.all(np.isin(self.domains, (SYNTHETIC, REAL))):
            raise InvalidInputError("domain labels must be 0 or 1")
        if np.any(~np.all(np.isfinite(self.targets[self.mask]), axis=1)):
            raise InvalidInputError("annotated samples need finite targets")


@dataclass
class DomainData:
    inputs: np.ndarray
    targets: np.ndarray
    domains: np.ndarray
    mask: np.ndarray
    names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    def batch(self, index: np.ndarray) -> Batch:
        return Batch(self.inputs[index], self.targets[index], self.domains[index], self.mask[index])

    def domain(self, label: int) -> np.ndarray:
        return self.inputs[self.domains == label]

    @classmethod
    def concat(cls, parts: Sequence["DomainData"]) -> "DomainData":
        return cls(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.domains for p in parts]),
            np.concatenate([p.mask for p in parts]),
            [n for p in parts for n in p.names],
        )


def _balanced_batch(data: DomainData, batch_size: int, rng: np.random.Generator) -> Batch:
    half = batch_size // 2
    picks = []
    for label, count in ((SYNTHETIC, half), (REAL, batch_size - half)):
        pool = np.flatnonzero(data.domains == label)
        if pool.size == 0:
            raise InvalidInputError(f"training data holds no samples of domain {label}")
        picks.append(rng.choice(pool, size=count, replace=True))
    return data.batch(np.concatenate(picks))


def _check_finite(nets: AdaptationNets) -> None:
    for name, net in nets.components().items():
        for k, p in enumerate(net.parameters()):
            p.check_finite(f"{name} parameter {k}")


def train_stage1(
    nets: AdaptationNets,
    data: DomainData,
    config: TrainConfig,
    rng: np.random.Generator,
    steps: Optional[int] = None,
    history: Optional[List[dict]] = None,
    round_index: int = 0,
) -> AdaptationNets:
    """Extractor frozen; regressor on the pose loss, mixer on the domain-classification loss."""
    nets = copy.deepcopy(nets)
    steps = config.stage1_steps if steps is None else steps
    opt_reg = SGD(nets.regressor.parameters(), config.learning_rate, config.momentum)
    opt_mix = SGD(nets.mixer.parameters(), config.learning_rate, config.momentum)
    for step in range(steps):
        batch = _balanced_batch(data, config.batch_size, rng)
        n = len(batch.inputs)
        feats = nets.extractor.forward(batch.inputs)

        nets.regressor.zero_grad()
        reg, g_pred = loss_reg(nets.regressor.forward(feats), batch.targets, batch.mask)
        nets.regressor.backward(g_pred / n)

        nets.mixer.zero_grad()
        dom, g_p = loss_domain_stage1(nets.mixer.forward(feats)[:, 0], batch.domains)
        nets.mixer.backward(g_p[:, None] / n)

        opt_reg.step()
        opt_mix.step()
        _check_finite(nets)
        if history is not None:
            history.append(_history_row(round_index, 1, step, reg, dom, config.lambda_domain, n))
    return nets


def train_stage2(
    nets: AdaptationNets,
    data: DomainData,
    config: TrainConfig,
    rng: np.random.Generator,
    steps: Optional[int] = None,
    history: Optional[List[dict]] = None,
    round_index: int = 0,
) -> AdaptationNets:
    """Mixer frozen; extractor and regressor on pose loss + lambda * confusion loss.

    Unannotated real samples contribute only the confusion term.
    """
    nets = copy.deepcopy(nets)
    steps = config.stage2_steps if steps is None else steps
    opt_ext = SGD(nets.extractor.parameters(), config.learning_rate, config.momentum)
    opt_reg = SGD(nets.regressor.parameters(), config.learning_rate, config.momentum)
    for step in range(steps):
        batch = _balanced_batch(data, config.batch_size, rng)
        n = len(batch.inputs)
        feats = nets.extractor.forward(batch.inputs)

        nets.regressor.zero_grad()
        reg, g_pred = loss_reg(nets.regressor.forward(feats), batch.targets, batch.mask)
        g_feat = nets.regressor.backward(g_pred / n)

        dom, g_p = loss_domain_stage2(nets.mixer.forward(feats)[:, 0])
        g_feat = g_feat + config.lambda_domain * nets.mixer.backward(g_p[:, None] / n)
        nets.mixer.zero_grad()

        nets.extractor.zero_grad()
        nets.extractor.backward(g_feat)
        opt_ext.step()
        opt_reg.step()
        _check_finite(nets)
        if history is not None:
            history.append(_history_row(round_index, 2, step, reg, dom, config.lambda_domain, n))
    return nets


def _history_row(round_index: int, stage: int, step: int, reg: float, dom: float, lam: float, n: int) -> dict:
    return {
        "round": round_index,
        "stage": stage,
        "step": step,
        "loss_reg": reg / n,
        "loss_domain": dom / n,
        "loss_total": total_loss(reg, dom, lam) / n,
    }


def train_alternating(
    nets: AdaptationNets,
    data: DomainData,
    config: TrainConfig,
    rng: np.random.Generator,
    rounds: Optional[int] = None,
) -> Tuple[AdaptationNets, pd.DataFrame]:
    """Stage 1 then stage 2, repeated; the history holds per-step batch-mean losses."""
    rounds = config.rounds if rounds is None else rounds
    if rounds < 1:
        raise InvalidInputError("at least one training round is required")
    rows: List[dict] = []
    for r in range(rounds):
        nets = train_stage1(nets, data, config, rng, history=rows, round_index=r)
        nets = train_stage2(nets, data, config, rng, history=rows, round_index=r)
        last = rows[-1]
        logger.info(f"Round {r + 1}/{rounds}: reg {last['loss_reg']:.4f}, domain {last['loss_domain']:.4f}")
    return nets, pd.DataFrame(rows, columns=["round", "stage", "step", "loss_reg", "loss_domain", "loss_total"])


def train_baseline(
    nets: AdaptationNets,
    data: DomainData,
    config: TrainConfig,
    rng: np.random.Generator,
    steps: Optional[int] = None,
) -> AdaptationNets:
    """Extractor and regressor on the pose loss only, same annotated samples, no domain terms.

    Without ``steps`` it follows the alternating schedule: each round runs the stage-1
    steps on the regressor alone and the stage-2 steps on both, so the extractor gets
    as many updates as in ``train_alternating``. ``steps`` runs that many joint steps.
    """
    nets = copy.deepcopy(nets)
    if steps is None:
        round_schedule = [False] * config.stage1_steps + [True] * config.stage2_steps
        schedule = round_schedule * config.rounds
    else:
        schedule = [True] * steps
    opt_ext = SGD(nets.extractor.parameters(), config.learning_rate, config.momentum)
    opt_reg = SGD(nets.regressor.parameters(), config.learning_rate, config.momentum)
    annotated = np.flatnonzero(data.mask)
    if annotated.size == 0:
        raise InvalidInputError("baseline training needs annotated samples")
    for joint in schedule:
        batch = data.batch(rng.choice(annotated, size=config.batch_size, replace=True))
        n = len(batch.inputs)
        feats = nets.extractor.forward(batch.inputs)
        nets.regressor.zero_grad()
        _, g_pred = loss_reg(nets.regressor.forward(feats), batch.targets, batch.mask)
        g_feat = nets.regressor.backward(g_pred / n)
        if joint:
            nets.extractor.zero_grad()
            nets.extractor.backward(g_feat)
            opt_ext.step()
        opt_reg.step()
        _check_finite(nets)
    return nets


def regression_error(nets: AdaptationNets, data: DomainData) -> float:
    """Mean per-sample Euclidean pose error over annotated samples."""
    if not data.mask.any():
        raise InvalidInputError("no annotated samples to evaluate")
    loss, _ = loss_reg(nets.predict(data.inputs), data.targets, data.mask)
    return loss / int(data.mask.sum())


def probe_domain_accuracy(synthetic: np.ndarray, real: np.ndarray, seed: int = 0, folds: int = 5) -> float:
    """Cross-validated accuracy of a fresh logistic-regression domain probe.

    The larger domain is subsampled to the size of the smaller one, so 0.5 means
    the domains are indistinguishable.
    """
    synthetic = np.asarray(synthetic, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if len(synthetic) < 10 or len(real) < 10:
        raise InvalidInputError(
            f"domain probe needs at least 10 samples per domain, got {len(synthetic)} and {len(real)}"
        )
    rng = np.random.default_rng(seed)
    count = min(len(synthetic), len(real))
    synthetic = synthetic[np.sort(rng.choice(len(synthetic), count, replace=False))]
    real = real[np.sort(rng.choice(len(real), count, replace=False))]
    x = np.vstack([synthetic, real])
    y = np.concatenate([np.zeros(count), np.ones(count)])
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
    splits = StratifiedKFold(n_splits=min(folds, count), shuffle=True, random_state=seed)
    return float(cross_val_score(probe, x, y, cv=splits).mean())


def make_toy_domains(config: TrainConfig, rng: np.random.Generator) -> Tuple[DomainData, DomainData]:
    """Synthetic and real Gaussian domains sharing content dims; real nuisance dims are shifted.

    Targets are a fixed linear map of the content dims. Returns (train, real holdout).
    """
    n = config.toy_samples
    c = config.toy_content_dims
    d = config.toy_dim
    if c > d:
        raise InvalidInputError("content dims exceed the toy input dimension")
    mapping = rng.normal(0.0, 1.0 / np.sqrt(c), (c, POSE_DIM))

    def domain(count: int, shift: float) -> Tuple[np.ndarray, np.ndarray]:
        content = rng.normal(size=(count, c))
        nuisance = rng.normal(size=(count, d - c)) + shift
        return np.hstack([content, nuisance]), content @ mapping

    x_syn, t_syn = domain(n, 0.0)
    x_real, t_real = domain(n, config.toy_shift)
    holdout = max(1, int(round(n * config.holdout_fraction)))
    keep = n - holdout
    real_mask = np.zeros(keep, dtype=bool)
    real_mask[:min(config.annotated_real, keep)] = True
    real_targets = np.where(real_mask[:, None], t_real[:keep], np.nan)

    train = DomainData.concat([
        DomainData(x_syn, t_syn, np.full(n, SYNTHETIC), np.ones(n, dtype=bool)),
        DomainData(x_real[:keep], real_targets, np.full(keep, REAL), real_mask),
    ])
    test = DomainData(x_real[keep:], t_real[keep:], np.full(holdout, REAL), np.ones(holdout, dtype=bool))
    return train, test


def _annotation_lines(dataset_dir: Path) -> List[AnnotationRecord]:
    path = dataset_dir / "annotations.jsonl"
    if not path.exists():
        raise AssetError(f"no annotations.jsonl in {dataset_dir}")
    try:
        return [
            AnnotationRecord.model_validate_json(line)
            for line in path.read_text(encoding="utf-8").splitlines() if line.strip()
        ]
    except ValidationError as e:
        raise AssetError(f"malformed annotations in {path}: {e}")


def load_image_domain(
    dataset_dir: Union[str, Path],
    label: int,
    size: int = 24,
    annotated: Optional[int] = None,
) -> DomainData:
    """Flattened size x size grayscale crops with pelvis-centered normalized pose targets."""
    dataset_dir = Path(dataset_dir)
    records = _annotation_lines(dataset_dir)
    if not records:
        raise AssetError(f"dataset {dataset_dir} is empty")
    inputs, targets = [], []
    for record in records:
        try:
            with Image.open(dataset_dir / record.image) as img:
                gray = img.convert("L").resize((size, size), Image.BILINEAR)
        except OSError as e:
            raise AssetError(f"cannot read {record.image}: {e}")
        inputs.append(np.asarray(gray, dtype=np.float64).ravel() / 255.0)
        pose = np.asarray(record.pose45_camera_normalized).reshape(15, 3)
        targets.append((pose - pose[0]).ravel())
    count = len(records)
    mask = np.ones(count, dtype=bool)
    if annotated is not None:
        mask[annotated:] = False
    targets = np.where(mask[:, None], np.array(targets), np.nan)
    return DomainData(np.array(inputs), targets, np.full(count, label), mask, [r.image for r in records])


def save_history(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, float_format="%.8g")
    return path


def save_checkpoint(nets: AdaptationNets, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = CheckpointFile(
        nets={name: net.to_state() for name, net in nets.components().items()},
        checksums=nets.checksum(),
    )
    path.write_text(document.model_dump_json(), encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path]) -> AdaptationNets:
    path = Path(path)
    try:
        document = CheckpointFile.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as e:
        raise AssetError(f"cannot read checkpoint {path}: {e}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise AssetError(f"malformed checkpoint {path}: {e}")
    missing = {"extractor", "regressor", "mixer"} - set(document.nets)
    if missing:
        raise AssetError(f"checkpoint {path} lacks {sorted(missing)}")
    nets = AdaptationNets(**{name: MlpNet.from_state(document.nets[name]) for name in ("extractor", "regressor", "mixer")})
    if nets.checksum() != document.checksums:
        logger.warning(f"Checkpoint {path}: parameter checksums differ from the stored ones")
    return nets
