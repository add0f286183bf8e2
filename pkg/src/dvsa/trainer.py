"""Joint training loop, configuration and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import AlignmentParams, atv_forward, class_prototypes, vta_forward
from .diff_core import OptimState, ParamStore, Tensor, gap, sgd_step
from .data_io import PartialDataset
from .disambiguation import (
    SoftLabelState,
    correction_factor,
    disambiguation_accuracy,
    semantic_confidence,
    semantic_loss,
    update_soft_labels,
    visual_loss,
    visual_predictions,
)
from .inference_metrics import EvalSplit, GzslReport, evaluate
from .mi_estimation import CriticParams, PairIndex, build_pairs, js_critic_loss, nwj_mi_value
from .semantic_space import AttributeSelection, SemanticSpace, attribute_entropy, select_attributes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DVSACKPT"
CKPT_VERSION = 1

# sub-seed offsets from the single run seed
SEED_ALIGNMENT, SEED_CRITIC, SEED_LOOP = 1, 2, 3


class ConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} ({value})")
        self.component = component


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.0
    grad_clip: float | None = None
    seed: int = 7
    tau: float = 20.0
    alpha: float = 0.5
    d: int | None = None  # attention width; None means min(d_v, 64)
    mi_hidden_width: int = 64
    mi_neg_per_pos: int = 5
    mi_exp_clamp: float = 20.0
    use_vta: bool = True
    use_label_update: bool = True
    use_sem_loss: bool = True
    use_atv_omega: bool = True
    use_mi: bool = True
    loss_reduction: str = "sum"
    share_output_projection: bool = True
    omega_grad: bool = False
    mi_detach_encoder_on_js: bool = False
    gamma: float = 0.7
    inference_score: str = "cosine"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.lr >= 0.0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")
        if self.inference_score not in ("cosine", "dot"):
            raise ConfigError(f"inference_score must be 'cosine' or 'dot', got {self.inference_score!r}")
        if not self.use_vta and (self.use_sem_loss or self.use_mi or self.use_atv_omega):
            raise ConfigError("semantic loss, omega and MI all consume the attention outputs; they need use_vta")
        if self.use_mi and self.batch_size < 2:
            raise ConfigError("MI pairs need batch_size >= 2")

    # -- flat key = value files ------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for raw_key, raw in values.items():
            key = raw_key.replace(".", "_")
            if key not in fields:
                raise ConfigError(f"unknown config key {raw_key!r}")
            kwargs[key] = _coerce(key, fields[key].type, raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = {}
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        return cls.from_mapping(values)

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in dataclasses.asdict(self).items())

    def with_overrides(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    t = str(typ)
    low = raw.strip().lower()
    try:
        if "bool" in t:
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if "None" in t and low in ("none", ""):
            return None
        if "int" in t:
            return int(raw)
        if "float" in t:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


# -- model ---------------------------------------------------------------------


@dataclass
class ForwardResult:
    total: Tensor
    components: dict[str, Tensor]
    M: Tensor
    M_sem: Tensor | None
    omega: np.ndarray | None
    a_hat: Tensor | None
    vta_attn: np.ndarray | None
    atv_attn: np.ndarray | None


class DVSAModel:
    """Parameters plus the forward pass that produces every loss term."""

    def __init__(self, semantic: SemanticSpace, seen_classes, d_v: int, cfg: TrainConfig):
        self.cfg = cfg
        self.semantic = semantic
        self.seen_classes = np.asarray(seen_classes, dtype=np.int64)
        self.d = cfg.d if cfg.d is not None else min(d_v, 64)
        self.store = ParamStore()
        self.alignment = AlignmentParams.init(
            semantic.d_w2v, d_v, self.d, semantic.K,
            np.random.default_rng(cfg.seed + SEED_ALIGNMENT),
            store=self.store,
            share_output_projection=cfg.share_output_projection,
        )
        self.critic = CriticParams.init(d_v, cfg.mi_hidden_width, np.random.default_rng(cfg.seed + SEED_CRITIC), store=self.store)
        self.selection: AttributeSelection = select_attributes(attribute_entropy(semantic))

    def prototypes(self, classes=None) -> Tensor:
        S = self.semantic.S if classes is None else self.semantic.S[classes]
        return class_prototypes(S, self.alignment)

    def active_names(self) -> list[str]:
        names = list(self.alignment.names())
        if self.cfg.use_mi:
            names += list(self.critic.names())
        return names

    def encoder_names(self) -> list[str]:
        return ["W_Q1", "W_K1", "W_V1", "W_O"]

    def attend(self, f) -> tuple[Tensor, np.ndarray]:
        return vta_forward(self.semantic.attr_embed, f, self.alignment)

    def sample_pairs(self, a_hat: Tensor, rng: np.random.Generator) -> PairIndex:
        return build_pairs(a_hat.detach(), self.selection, rng, self.cfg.mi_neg_per_pos)[1]

    def forward(self, f, l_tilde, pair_index: PairIndex | None = None, omega=None) -> ForwardResult:
        """Joint loss L_vis + L_sem - I_MI on a batch of region grids ``f`` (B, D, d_v).

        ``omega`` overrides the correction factor (held fixed for gradient checks).
        """
        cfg = self.cfg
        f = Tensor(f)
        v = gap(f)
        p = self.prototypes(self.seen_classes)
        M = visual_predictions(v, p, cfg.tau)
        comps: dict[str, Tensor] = {}
        a_hat = vta_attn = atv_attn = M_sem = None
        if cfg.use_vta:
            a_hat, vta_attn = self.attend(f)

        if omega is None:
            if cfg.use_atv_omega:
                v_hat, atv_attn = atv_forward(f, a_hat, self.alignment)
                om = correction_factor(gap(v_hat), p)
                omega = om if cfg.omega_grad else om.data
            else:
                omega = np.zeros(M.shape)
        comps["vis"] = visual_loss(M, l_tilde, omega, cfg.loss_reduction)
        total = comps["vis"]

        if cfg.use_sem_loss:
            M_sem = semantic_confidence(a_hat, p, cfg.tau)
            comps["sem"] = semantic_loss(M_sem, l_tilde, cfg.loss_reduction)
            total = total + comps["sem"]
        if cfg.use_mi:
            if pair_index is None:
                raise ValueError("MI term enabled but no pair index supplied")
            comps["ami"] = nwj_mi_value(pair_index.materialize(a_hat), self.critic, cfg.mi_exp_clamp)
            total = total - comps["ami"]
        om_data = omega.data if isinstance(omega, Tensor) else np.asarray(omega)
        return ForwardResult(total, comps, M, M_sem, om_data, a_hat, vta_attn, atv_attn)

    def visual_matrix(self, features) -> np.ndarray:
        """M over all given instances, no graph kept."""
        v = np.asarray(features).mean(axis=-2)
        return visual_predictions(v, self.prototypes(self.seen_classes).data, self.cfg.tau).data


# -- trainer -------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    vis: float
    sem: float
    ami: float
    js: float
    disamb_acc: float

    @staticmethod
    def header() -> list[str]:
        return [f.name for f in dataclasses.fields(EpochMetrics)]

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in self.header()[1:]]


class Trainer:
    def __init__(self, data: PartialDataset, cfg: TrainConfig, semantic: SemanticSpace | None = None):
        semantic = semantic if semantic is not None else data.semantic
        if semantic is None:
            raise ConfigError("training needs a semantic space")
        if data.N == 0:
            raise ConfigError("training set is empty")
        self.data = data
        self.cfg = cfg
        self.seen = np.asarray(data.seen_classes, dtype=np.int64)
        self.model = DVSAModel(semantic, self.seen, data.features.shape[-1], cfg)
        # training works in the seen-class columns only
        self.candidates = data.candidates[:, self.seen].astype(np.float64)
        self.state = SoftLabelState.init(self.candidates, cfg.alpha)
        self.optim = OptimState(lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.grad_clip)
        self.js_optim = OptimState(lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.grad_clip)
        self.rng = np.random.default_rng(cfg.seed + SEED_LOOP)
        self.history: list[EpochMetrics] = []
        self._seen_pos = {c: i for i, c in enumerate(self.seen)}

    @property
    def store(self) -> ParamStore:
        return self.model.store

    def _step(self, idx: np.ndarray) -> dict[str, float]:
        cfg, model, store = self.cfg, self.model, self.store
        f = self.data.features[idx]
        l_tilde = self.state.l_tilde[idx]
        pair_index = None
        js_val = 0.0
        if cfg.use_mi:
            a_hat, _ = model.attend(Tensor(f))
            pair_index = model.sample_pairs(a_hat, self.rng)
            js = js_critic_loss(pair_index.materialize(a_hat), model.critic)
            js_val = js.item()
            _check_finite("js", js_val)
            store.zero_grad()
            js.backward()
            names = list(model.critic.names())
            if not cfg.mi_detach_encoder_on_js:
                names += model.encoder_names()
            _fill_missing(store, names)
            sgd_step(store, self.js_optim, names)
            store.zero_grad()

        out = model.forward(f, l_tilde, pair_index)
        values = {k: t.item() for k, t in out.components.items()}
        for k, val in values.items():
            _check_finite(k, val)
        _check_finite("loss", out.total.item())
        store.zero_grad()
        out.total.backward()
        names = model.active_names()
        _fill_missing(store, names)
        sgd_step(store, self.optim, names)
        store.zero_grad()
        values["loss"] = out.total.item()
        values["js"] = js_val
        return values

    def train_epoch(self) -> EpochMetrics:
        n = self.data.N
        order = self.rng.permutation(n)
        sums = {"loss": 0.0, "vis": 0.0, "sem": 0.0, "ami": 0.0, "js": 0.0}
        n_batches = 0
        for start in range(0, n, self.cfg.batch_size):
            idx = order[start : start + self.cfg.batch_size]
            if self.cfg.use_mi and idx.size < 2:
                continue
            for k, v in self._step(idx).items():
                sums[k] += v
            n_batches += 1
        if self.cfg.use_label_update:
            M = self.model.visual_matrix(self.data.features)
            self.state = update_soft_labels(self.state, M, self.candidates)
        truth = np.array([self._seen_pos[c] for c in self.data.true_labels])
        metrics = EpochMetrics(
            epoch=len(self.history) + 1,
            disamb_acc=disambiguation_accuracy(self.state.l_tilde, truth),
            **{k: v / max(n_batches, 1) for k, v in sums.items()},
        )
        self.history.append(metrics)
        log.info("epoch %d loss %.4f disamb %.3f", metrics.epoch, metrics.loss, metrics.disamb_acc)
        return metrics

    def run(self, epochs: int | None = None, on_epoch=None) -> list[EpochMetrics]:
        target = self.cfg.epochs if epochs is None else epochs
        while len(self.history) < target:
            m = self.train_epoch()
            if on_epoch is not None:
                on_epoch(self, m)
        return self.history

    def evaluate(self, split: EvalSplit, gamma: float | None = None) -> GzslReport:
        gamma = self.cfg.gamma if gamma is None else gamma
        return evaluate(split, self.model.prototypes().data, gamma, self.cfg.inference_score)

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        arrays: list[tuple[str, np.ndarray]] = []
        for name, t in self.store.items():
            arrays.append((f"param/{name}", t.data))
        for tag, opt in (("optim", self.optim), ("js_optim", self.js_optim)):
            for name in sorted(opt.velocity):
                arrays.append((f"{tag}/{name}", opt.velocity[name]))
        arrays.append(("state/U", self.state.U))
        arrays.append(("state/l_tilde", self.state.l_tilde))
        header = {
            "config": dataclasses.asdict(self.cfg),
            "epoch": len(self.history),
            "state_epoch": self.state.epoch,
            "optim_step": self.optim.step,
            "js_optim_step": self.js_optim.step,
            "rng": self.rng.bit_generator.state,
            "history": [dataclasses.asdict(m) for m in self.history],
            "arrays": [[name, list(a.shape)] for name, a in arrays],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)))
            fh.write(blob)
            for _, a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def from_checkpoint(cls, path, data: PartialDataset, semantic: SemanticSpace | None = None) -> "Trainer":
        raw = Path(path).read_bytes()
        if raw[:8] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[16 : 16 + hlen])
        cfg = TrainConfig(**header["config"])
        trainer = cls(data, cfg, semantic)
        off = 16 + hlen
        params, vel, js_vel, st = {}, {}, {}, {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            if off + 8 * n > len(raw):
                raise ValueError(f"{path}: truncated at array {name}")
            a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            kind, key = name.split("/", 1)
            {"param": params, "optim": vel, "js_optim": js_vel, "state": st}[kind][key] = a
        trainer.store.load_state(params)
        trainer.optim.velocity = vel
        trainer.optim.step = header["optim_step"]
        trainer.js_optim.velocity = js_vel
        trainer.js_optim.step = header["js_optim_step"]
        trainer.state = dataclasses.replace(trainer.state, U=st["U"], l_tilde=st["l_tilde"], epoch=header["state_epoch"])
        trainer.rng.bit_generator.state = header["rng"]
        trainer.history = [EpochMetrics(**m) for m in header["history"]]
        return trainer


def _fill_missing(store: ParamStore, names) -> None:
    for name in names:
        t = store[name]
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _check_finite(component: str, value: float) -> None:
    if not math.isfinite(value):
        raise NumericAbort(component, value)


def run_training(data: PartialDataset, cfg: TrainConfig, semantic: SemanticSpace | None = None, out_dir=None) -> Trainer:
    trainer = Trainer(data, cfg, semantic)
    trainer.run()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save_checkpoint(out / "checkpoint.bin")
        write_history(trainer.history, out / "history.csv")
    return trainer


def write_history(history: list[EpochMetrics], path) -> None:
    lines = [",".join(EpochMetrics.header())]
    lines += [",".join(m.row()) for m in history]
    Path(path).write_text("\n".join(lines) + "\n")
