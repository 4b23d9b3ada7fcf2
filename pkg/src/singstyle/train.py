"""Two-phase training: reconstruction (encoders, pitch, decoder), then the style/duration LM."""
from __future__ import annotations

import copy
import logging
import math
import warnings

import numpy as np
import torch

from .checkpoint import model_from_payload, parameter_digest, read_checkpoint, save_checkpoint
from .config import Config
from .corpus import by_singer
from .cvq import LatentPool, reinit_dead_codes
from .data import F0Stats, collate, record_tensors
from .model import LOSS_KEYS, SingingModel

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step, self.last_good = step, last_good


def set_deterministic(threads: int = 1):
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def _lr_factor(final_frac: float, total: int):
    """Cosine decay from 1 to ``final_frac`` over ``total`` steps."""
    def f(step):
        p = min(step, total) / max(total, 1)
        return final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * p))
    return f


def prompt_candidates(records, i: int, groups: dict) -> list[int]:
    """Other utterances of the same singer, restricted to those sharing the most
    global style labels (emotion, method) with utterance ``i``."""
    rec = records[i]
    others = [j for j in groups[rec.singer_id] if j != i]
    if not others:
        return []
    match = [(records[j].global_style.emotion == rec.global_style.emotion)
             + (records[j].global_style.method == rec.global_style.method) for j in others]
    best = max(match)
    return [j for j, m in zip(others, match) if m == best]


def _prompt_index(records, i: int, groups: dict, generator) -> int:
    """Uniform over the best-matching same-singer utterances; self when there are none."""
    others = prompt_candidates(records, i, groups)
    if not others:
        warnings.warn(f"singer {records[i].singer_id} has a single utterance; using it as its own prompt")
        return i
    return others[int(torch.randint(len(others), (1,), generator=generator))]


class _Trainer:
    stage = 0

    def __init__(self, records, cfg: Config, model: SingingModel, steps: int):
        if not records:
            raise ValueError("empty corpus")
        self.records = records
        self.cfg = cfg
        self.model = model
        self.total_steps = steps
        self.groups = by_singer(records)
        self.generator = torch.Generator().manual_seed(cfg.seed + self.stage)
        self.step = 0
        self.history: list[dict] = []
        params = [p for m in self.trainable() for p in m.parameters()]
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _lr_factor(cfg.lr_final_frac, steps))
        self._last_good = None
        self.meta: dict = {}

    def trainable(self):
        raise NotImplementedError

    def batch_indices(self) -> list[int]:
        n = len(self.records)
        return torch.randperm(n, generator=self.generator)[: min(self.cfg.batch_size, n)].tolist()

    # ---------------------------------------------------------------- state io
    def state(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "generator": self.generator.get_state(),
            "total_steps": self.total_steps,
        }

    def load_state(self, st: dict):
        self.optimizer.load_state_dict(st["optimizer"])
        self.scheduler.load_state_dict(st["scheduler"])
        self.generator.set_state(st["generator"])

    def save(self, path):
        return save_checkpoint(path, self.model, self.stage, self.step, self.state(), self.history, self.meta)

    # ------------------------------------------------------------------- loop
    def compute_losses(self) -> dict:
        raise NotImplementedError

    def after_step(self):
        pass

    def train_step(self) -> dict:
        for m in self.trainable():
            m.train()
        losses = self.compute_losses()
        total = self.model.weighted_total(losses)
        if not torch.isfinite(total):
            raise TrainingDiverged(self.step, self._last_good)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        self.optimizer.step()
        self.scheduler.step()
        self.step += 1
        rec = {"step": self.step, "total": float(total.detach())}
        rec.update({k: float(v.detach()) for k, v in losses.items()})
        self.history.append(rec)
        self.after_step()
        return rec

    def run(self, steps: int | None = None, checkpoint_path=None, checkpoint_every: int = 500):
        end = self.total_steps if steps is None else self.step + steps
        while self.step < end:
            try:
                rec = self.train_step()
            except TrainingDiverged:
                if checkpoint_path is not None and self._last_good is not None:
                    bad_path = f"{checkpoint_path}.last_good"
                    torch.save(self._last_good, bad_path)
                    raise TrainingDiverged(self.step, bad_path) from None
                raise
            if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                log.info("stage %d step %d %s", self.stage, self.step,
                         " ".join(f"{k}={rec[k]:.4f}" for k in ("total",) + LOSS_KEYS))
            if checkpoint_path is not None and self.step % checkpoint_every == 0:
                self.save(checkpoint_path)
                self._last_good = copy.deepcopy(read_checkpoint(checkpoint_path))
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.model


# ======================================================================= stage 1


class Stage1Trainer(_Trainer):
    stage = 1

    def __init__(self, records, cfg: Config, model: SingingModel | None = None):
        torch.manual_seed(cfg.seed)
        stats = F0Stats.from_records(records, relative=cfg.pitch_relative)
        if model is None:
            model = SingingModel(cfg)
            model.set_stats(stats)
        self.items = [record_tensors(r, model.stats) for r in records]
        self.pool = LatentPool(cfg.cvq_pool_size)
        super().__init__(records, cfg, model, cfg.stage1_steps)

    def trainable(self):
        return self.model.stage1_modules()

    def compute_losses(self):
        idx = self.batch_indices()
        prompts = [_prompt_index(self.records, i, self.groups, self.generator) for i in idx]
        pad = self.cfg.phoneme_pad
        batch = collate([self.items[i] for i in idx], pad)
        prompt = collate([self.items[i] for i in prompts], pad)
        losses, z = self.model.stage1_losses(batch, prompt, self.generator)
        self.pool.push(z)
        return losses

    def after_step(self):
        cfg = self.cfg
        if cfg.cvq_reinit and cfg.cvq_reinit_every and self.step % cfg.cvq_reinit_every == 0:
            reinit_dead_codes(self.model.style.codebook, self.pool.get(), cfg.dead_threshold, self.generator)

    def state(self):
        st = super().state()
        st["pool"] = self.pool.get().clone()
        return st

    def load_state(self, st):
        super().load_state(st)
        if st.get("pool") is not None and st["pool"].numel():
            self.pool.buf = st["pool"].clone()

    @classmethod
    def resume(cls, records, path) -> "Stage1Trainer":
        payload = read_checkpoint(path)
        model = model_from_payload(payload)
        tr = cls(records, model.cfg, model)
        tr.load_state(payload["train_state"])
        tr.step, tr.history = payload["step"], list(payload["history"])
        return tr


def train_stage1(records, cfg: Config, out_path=None, steps: int | None = None, meta=None) -> SingingModel:
    tr = Stage1Trainer(records, cfg)
    tr.meta.update(meta or {})
    tr.run(steps, out_path)
    return tr.model


# ======================================================================= stage 2


@torch.no_grad()
def utterance_features(model: SingingModel, rec, item=None) -> dict:
    """Frozen stage-1 views of one utterance: content, style tokens, durations, timbre, labels."""
    item = item if item is not None else record_tensors(rec, model.stats)
    b = collate([item], model.cfg.phoneme_pad)
    content = model.content(b)[0]
    tokens, *_ = model.style(b["mel"], b["frame_mask"], b["durations"], b["ph_mask"])
    timbre = model.prompt_timbre(b["mel"], b["frame_lengths"])[0]
    return {
        "content": content, "tokens": tokens[0], "durations": item["durations"], "timbre": timbre,
        "method": item["method"], "emotion": item["emotion"], "tech": item["tech"],
    }


class Stage2Trainer(_Trainer):
    stage = 2

    def __init__(self, records, model: SingingModel, cfg: Config | None = None):
        cfg = cfg or model.cfg
        model.cfg = cfg
        for m in model.stage1_modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        self.stage1_digest = parameter_digest(model.stage1_modules())
        self.features = [utterance_features(model, r) for r in records]
        self.modes: list[str] = []
        super().__init__(records, cfg, model, cfg.stage2_steps)

    def trainable(self):
        return self.model.stage2_modules()

    def draw_mode(self) -> str:
        return "transfer" if float(torch.rand((), generator=self.generator)) < self.cfg.task_mix_p else "control"

    def compute_losses(self):
        seqs, targets = [], []
        for i in self.batch_indices():
            mode = self.draw_mode()
            self.modes.append(mode)
            j = _prompt_index(self.records, i, self.groups, self.generator)
            seqs.append(self.model.lm_sequence(mode, self.features[i], self.features[j]))
            targets.append(self.features[i])
        losses, _ = self.model.stage2_losses(seqs, targets)
        return losses

    def check_frozen(self):
        now = parameter_digest(self.model.stage1_modules())
        if now != self.stage1_digest:
            raise RuntimeError("stage-1 parameters changed during stage-2 training")

    def run(self, *a, **kw):
        out = super().run(*a, **kw)
        self.check_frozen()
        return out


def train_stage2(records, stage1_path, cfg: Config | None = None, out_path=None, steps: int | None = None,
                 meta=None):
    payload = read_checkpoint(stage1_path)
    model = model_from_payload(payload)
    if cfg is not None:
        stage1_keys = set(Config.__dataclass_fields__) - _STAGE2_KEYS
        clash = [k for k in stage1_keys if getattr(cfg, k) != getattr(model.cfg, k)]
        if clash:
            raise ValueError(f"config disagrees with the stage-1 checkpoint on {sorted(clash)}")
    tr = Stage2Trainer(records, model, cfg)
    tr.meta.update(payload.get("meta", {}))
    tr.meta.update(meta or {})
    tr.run(steps, out_path)
    return tr.model


_STAGE2_KEYS = {
    "seed", "batch_size", "lr", "lr_final_frac", "adam_beta1", "adam_beta2", "grad_clip", "stage1_steps",
    "stage2_steps", "task_mix_p", "w_cvq", "w_gdiff", "w_mdiff", "w_mae", "w_ssim", "w_dur", "w_style",
    "log_every", "sample_temperature", "sample_top_k", "ffe_tolerance", "mfcc_dim",
}


@torch.no_grad()
def teacher_forced_accuracy(model: SingingModel, records, mode: str, features=None) -> float:
    """Argmax style-token accuracy over every phoneme of ``records``; prompt = first prompt candidate."""
    model.eval()
    feats = features or [utterance_features(model, r) for r in records]
    groups = by_singer(records)
    correct = total = 0
    for i in range(len(records)):
        others = prompt_candidates(records, i, groups) or [i]
        seq = model.lm_sequence(mode, feats[i], feats[others[0]])
        logits, _, s_gt, _, _, dmask = model.lm_batch_outputs([seq], [feats[i]])
        pred = logits.argmax(-1)
        correct += int((pred[dmask] == s_gt[dmask]).sum())
        total += int(dmask.sum())
    return correct / max(total, 1)


def loss_drop(history: list[dict], keys=("gdiff", "mdiff", "mae", "ssim"), start: int = 50, window: int = 50):
    """Ratio of the summed ``keys`` averaged around ``start`` to the average over the final window."""
    vals = np.array([sum(h[k] for k in keys) for h in history])
    if len(vals) < start + window:
        raise ValueError("history too short")
    early = vals[max(0, start - window // 2): start + window // 2].mean()
    return float(early / vals[-window:].mean())
