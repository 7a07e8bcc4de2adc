"""Two-stage training: single-step pretraining and autoregressive multi-step finetuning."""

import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ._validation import ConfigError
from .data import N_INPUTS, NormStats, OceanNormalizer, valid_window_indices
from .grid import ChannelLayout, GridSpec, LandSeaMask, latitude_weights
from .mot import MixtureOfTime, SelectionMatrix
from .net import ForecastNet, NetConfig
from .objectives import LossConfig, charbonnier_loss, discounted_mean

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAGIC = b"MOTCKPT\0"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration, stage):
        self.iteration = iteration
        super().__init__(f"non-finite loss at {stage} iteration {iteration}")


class CheckpointError(IOError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    iterations: int = 2000
    batch_size: int = 1
    peak_lr: float = 2.5e-4
    floor_lr: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    alpha: float = 0.99
    k: int = 1
    routing: str = "topk"
    horizon: int = 4
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if not self.floor_lr < self.peak_lr:
            raise ConfigError("floor_lr must be below peak_lr")
        if self.routing not in ("topk", "mean"):
            raise ConfigError(f"unknown routing {self.routing!r}")
        if self.horizon < 1 or self.batch_size < 1:
            raise ConfigError("horizon and batch_size must be positive")

    def to_dict(self):
        return asdict(self)


def lr_at(step, cfg):
    """Cosine annealing from ``peak_lr`` at step 0 to ``floor_lr`` at ``iterations``."""
    total = cfg.iterations
    if step <= 0:
        return cfg.peak_lr
    if step >= total:
        return cfg.floor_lr
    return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1 + math.cos(math.pi * step / total))


@dataclass
class Checkpoint:
    net_config: NetConfig
    train_config: TrainConfig
    loss_config: LossConfig
    grid: GridSpec
    layout: ChannelLayout
    mask: LandSeaMask
    norm_stats: NormStats
    model_state: dict
    selection: SelectionMatrix
    iteration: int = 0
    stage: str = "pretrain"
    optim_state: dict = None
    rng_state: dict = None
    loss_history: list = field(default_factory=list)

    def build_net(self):
        net = ForecastNet(self.net_config, self.layout.total_channels, self.grid.shape, self.mask.ocean)
        net.load_state_dict(self.model_state)
        return net

    def config_hash(self):
        payload = json.dumps({
            "net": self.net_config.to_dict(), "train": self.train_config.to_dict(),
            "loss": asdict(self.loss_config)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the network, optimizer, routing statistic and sampling RNG for one run."""

    def __init__(self, store, stats, net_cfg, train_cfg, loss_cfg=None, train_range=None, net=None):
        self.store = store
        self.stats = stats
        self.net_cfg = net_cfg
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg or LossConfig(horizon=train_cfg.horizon)
        C = store.layout.total_channels
        if net is None:
            torch.manual_seed(train_cfg.seed)
            net = ForecastNet(net_cfg, C, store.grid.shape, store.mask.ocean)
        self.net = net
        self.mot = MixtureOfTime(C, net_cfg.n_inputs, train_cfg.k, train_cfg.alpha, train_cfg.routing).fit()
        self.optimizer = self._make_optimizer()
        self.rng = np.random.default_rng(train_cfg.seed)
        self.iteration = 0
        self.loss_history = []
        self.window_hook = None  # called with (rollout step, window tensor) during finetune
        norm = OceanNormalizer.from_stats(stats, store.channel_mask())
        self.data = torch.from_numpy(norm.transform(store.values))
        self.phase = np.array([t.hour // 6 for t in store.timestamps])
        self.doy = np.array([t.timetuple().tm_yday for t in store.timestamps])
        self.ocean = torch.from_numpy(np.array(store.channel_mask()))
        self.weights = torch.from_numpy(latitude_weights(store.grid.lat))
        self.train_range = train_range if train_range is not None else store.split()[0]

    def _make_optimizer(self):
        return torch.optim.AdamW(
            self.net.parameters(), lr=self.cfg.peak_lr, betas=(self.cfg.beta1, self.cfg.beta2),
            weight_decay=self.cfg.weight_decay)

    def to(self, dtype):
        self.net.to(dtype)
        self.data = self.data.to(dtype)
        self.optimizer = self._make_optimizer()
        return self

    # -- pieces -----------------------------------------------------------

    def valid_indices(self, horizon):
        idx = valid_window_indices(self.store, self.train_range, self.net_cfg.n_inputs, horizon)
        if not idx:
            raise ConfigError("training range is too short for one window")
        return idx

    def sample(self, horizon):
        return self.rng.choice(self.valid_indices(horizon), size=self.cfg.batch_size)

    def window(self, t_idx):
        N = self.net_cfg.n_inputs
        offsets = np.arange(-(N - 1), 1)
        return self.data[t_idx[:, None] + offsets[None]]

    def step_objective(self, candidates, merged, target):
        cfg, w, m = self.loss_cfg, self.weights, self.ocean
        loss = cfg.merged_weight * charbonnier_loss(merged, target, w, m, cfg.eps)
        if cfg.candidate_weight:
            for i in range(candidates.shape[1]):
                loss = loss + cfg.candidate_weight * charbonnier_loss(candidates[:, i], target, w, m, cfg.eps)
        return loss

    def forward(self, inputs, t_idx):
        """Candidates and merged forecast for targets at indices ``t_idx`` + 1."""
        valid = t_idx + 1
        cands = self.net(inputs, self.phase[valid], self.doy[valid])
        return cands, self.mot.merge(cands, self.ocean)

    def rollout_loss(self, t_idx, horizon, discount=None):
        """Autoregressive loss over ``horizon`` steps; returns (loss, step-1 candidates, step-1 target)."""
        discount = self.loss_cfg.discount if discount is None else discount
        window = self.window(t_idx)
        losses = []
        first = None
        for k in range(horizon):
            if self.window_hook is not None:
                self.window_hook(k, window)
            cands, merged = self.forward(window, t_idx + k)
            target = self.data[t_idx + k + 1]
            losses.append(self.step_objective(cands, merged, target))
            if k == 0:
                first = (cands.detach(), target)
            window = torch.cat([window[:, 1:], merged[:, None]], dim=1)
        return discounted_mean(losses, discount), first

    def compute_gradients(self, t_idx, horizon):
        self.optimizer.zero_grad(set_to_none=True)
        loss, first = self.rollout_loss(t_idx, horizon)
        loss.backward()
        return loss, first

    def step(self):
        horizon = 1 if self.cfg.stage == "pretrain" else self.cfg.horizon
        t_idx = self.sample(horizon)
        loss, (cands, target) = self.compute_gradients(t_idx, horizon)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(self.iteration, self.cfg.stage)
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.grad_clip)
        lr = lr_at(self.iteration, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        # V is frozen during the step and refreshed afterwards from single-step candidates
        self.mot.partial_fit(cands, target, self.ocean)
        self.loss_history.append(value)
        self.iteration += 1
        return value, lr

    def run(self, iterations=None, log_path=None, checkpoint_dir=None):
        end = self.cfg.iterations if iterations is None else min(self.iteration + iterations, self.cfg.iterations)
        writer = None
        if log_path is not None:
            new = not os.path.exists(log_path)
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["iteration", "lr", "loss", "stage"])
        try:
            while self.iteration < end:
                it = self.iteration
                loss, lr = self.step()
                if writer is not None:
                    writer.writerow([it, repr(lr), repr(loss), self.cfg.stage])
                if it % 100 == 0:
                    log.info("%s iter %d lr %.3g loss %.5f", self.cfg.stage, it, lr, loss)
                every = self.cfg.checkpoint_every
                if checkpoint_dir and every and self.iteration % every == 0:
                    save_checkpoint(self.checkpoint(), os.path.join(checkpoint_dir, f"ckpt_{self.cfg.stage}_{self.iteration:06d}.bin"))
        finally:
            if writer is not None:
                fh.close()
        return self

    # -- checkpointing ----------------------------------------------------

    def checkpoint(self):
        return Checkpoint(
            net_config=self.net_cfg, train_config=self.cfg, loss_config=self.loss_cfg,
            grid=self.store.grid, layout=self.store.layout, mask=self.store.mask,
            norm_stats=self.stats,
            model_state={k: v.detach().clone() for k, v in self.net.state_dict().items()},
            selection=self.mot.selection_.copy(), iteration=self.iteration, stage=self.cfg.stage,
            optim_state=_copy_optim_state(self.optimizer.state_dict()),
            rng_state=self.rng.bit_generator.state, loss_history=list(self.loss_history),
        )

    @classmethod
    def from_checkpoint(cls, ckpt, store, train_cfg=None, train_range=None):
        """Resume the same stage, or start a new stage from the checkpoint's weights and V."""
        cfg = train_cfg or ckpt.train_config
        net = ckpt.build_net()
        loss_cfg = LossConfig(**{**asdict(ckpt.loss_config), "horizon": cfg.horizon})
        trainer = cls(store, ckpt.norm_stats, ckpt.net_config, cfg, loss_cfg, train_range, net=net)
        trainer.mot.set_selection(SelectionMatrix(ckpt.selection.values, cfg.alpha, cfg.k))
        if ckpt.stage == cfg.stage and ckpt.optim_state is not None:
            trainer.optimizer.load_state_dict(ckpt.optim_state)
            trainer.iteration = ckpt.iteration
            trainer.loss_history = list(ckpt.loss_history)
            if ckpt.rng_state is not None:
                trainer.rng.bit_generator.state = ckpt.rng_state
        return trainer


def _copy_optim_state(sd):
    state = {int(k): {n: (v.detach().clone() if torch.is_tensor(v) else v) for n, v in s.items()}
             for k, s in sd["state"].items()}
    return {"state": state, "param_groups": json.loads(json.dumps(sd["param_groups"]))}


def pretrain(store, stats, net_cfg, train_cfg, loss_cfg=None, log_path=None, checkpoint_dir=None):
    if train_cfg.stage != "pretrain":
        raise ConfigError("pretrain requires stage='pretrain'")
    trainer = Trainer(store, stats, net_cfg, train_cfg, loss_cfg)
    trainer.run(log_path=log_path, checkpoint_dir=checkpoint_dir)
    return trainer.checkpoint()


def finetune(store, checkpoint, train_cfg, log_path=None, checkpoint_dir=None):
    if train_cfg.stage != "finetune":
        raise ConfigError("finetune requires stage='finetune'")
    trainer = Trainer.from_checkpoint(checkpoint, store, train_cfg)
    trainer.run(log_path=log_path, checkpoint_dir=checkpoint_dir)
    return trainer.checkpoint()


# ---------------------------------------------------------------------------
# serialisation: MAGIC | u32 version | u64 header length | JSON header | tensor payload


def _tensor_entries(ckpt):
    yield "mot/V", torch.from_numpy(ckpt.selection.values)
    yield "grid/mask", torch.from_numpy(np.ascontiguousarray(ckpt.mask.ocean, dtype=np.uint8))
    for name in sorted(ckpt.model_state):
        yield f"model/{name}", ckpt.model_state[name]
    if ckpt.optim_state is not None:
        for pid in sorted(ckpt.optim_state["state"]):
            for key in sorted(ckpt.optim_state["state"][pid]):
                v = ckpt.optim_state["state"][pid][key]
                yield f"optim/{pid}/{key}", v if torch.is_tensor(v) else torch.tensor(v)


def checkpoint_bytes(ckpt):
    tensors, payload, offset = [], io.BytesIO(), 0
    for name, t in _tensor_entries(ckpt):
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "net_config": ckpt.net_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "loss_config": asdict(ckpt.loss_config),
        "grid": ckpt.grid.to_dict(),
        "layout": ckpt.layout.to_dict(),
        "norm_stats": ckpt.norm_stats.to_dict(),
        "selection": {"alpha": ckpt.selection.alpha, "k": ckpt.selection.k},
        "iteration": ckpt.iteration,
        "stage": ckpt.stage,
        "param_groups": ckpt.optim_state["param_groups"] if ckpt.optim_state else None,
        "rng_state": ckpt.rng_state,
        "loss_history": ckpt.loss_history,
        "tensors": tensors,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hdr)) + hdr + payload.getvalue()


def atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt, path, manifest=True):
    data = checkpoint_bytes(ckpt)
    atomic_write(path, data)
    if manifest:
        entry = {
            "checkpoint": os.path.basename(path),
            "sha256": hashlib.sha256(data).hexdigest(),
            "version": CHECKPOINT_VERSION,
            "stage": ckpt.stage,
            "iteration": ckpt.iteration,
            "seed": ckpt.train_config.seed,
            "config_hash": ckpt.config_hash(),
            "configs": {"net": ckpt.net_config.to_dict(), "train": ckpt.train_config.to_dict(),
                        "loss": asdict(ckpt.loss_config)},
        }
        atomic_write(os.path.join(os.path.dirname(os.path.abspath(path)), "manifest.json"),
                     json.dumps(entry, indent=2, sort_keys=True).encode())
    return path


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    return checkpoint_from_bytes(data, path)


def checkpoint_from_bytes(data, name="checkpoint"):
    head = len(MAGIC) + 12
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{name}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < head + hlen:
        raise CheckpointError(f"{name}: truncated header")
    try:
        header = json.loads(data[head:head + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{name}: corrupt header") from exc
    base = head + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(data):
            raise CheckpointError(f"{name}: truncated payload ({entry['name']})")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]).newbyteorder("<"), count=int(np.prod(entry["shape"], dtype=np.int64)), offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(entry["shape"]))
    if base + sum(e["nbytes"] for e in header["tensors"]) != len(data):
        raise CheckpointError(f"{name}: payload size mismatch")
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optim_state = None
    if header["param_groups"] is not None:
        state = {}
        for k, v in tensors.items():
            if k.startswith("optim/"):
                _, pid, key = k.split("/", 2)
                state.setdefault(int(pid), {})[key] = v
        groups = header["param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        optim_state = {"state": state, "param_groups": groups}
    grid = GridSpec.from_dict(header["grid"])
    return Checkpoint(
        net_config=NetConfig(**header["net_config"]),
        train_config=TrainConfig(**header["train_config"]),
        loss_config=LossConfig(**header["loss_config"]),
        grid=grid,
        layout=ChannelLayout.from_dict(header["layout"]),
        mask=LandSeaMask(tensors["grid/mask"].numpy().reshape(grid.shape)),
        norm_stats=NormStats.from_dict(header["norm_stats"]),
        model_state=model_state,
        selection=SelectionMatrix(tensors["mot/V"].numpy(), header["selection"]["alpha"], header["selection"]["k"]),
        iteration=header["iteration"],
        stage=header["stage"],
        optim_state=optim_state,
        rng_state=header["rng_state"],
        loss_history=header["loss_history"],
    )


def file_sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


__all__ = [
    "Checkpoint", "CheckpointError", "NonFiniteLossError", "TrainConfig", "Trainer",
    "finetune", "load_checkpoint", "lr_at", "pretrain", "save_checkpoint", "N_INPUTS",
]
