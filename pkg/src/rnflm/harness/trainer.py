"""Training loop, evaluation and sampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..data import (Corpus, Vocab, BatchStream, build_vocab, find_split_file, load_corpus, make_batch,
                    synthetic_grammar)
from ..divergences import mmd_gaussian, mutual_information_from_posteriors
from ..errors import ConfigError, NonFiniteError, NumericalAbort, SingularFlowError
from ..flows import stack_forward
from ..nets import TextVAE
from ..objectives import (AnnealSchedule, StepNoise, anneal, elbo, flow_elbo, sentence_terms,
                          wae_rnf_loss)
from ..rnf import ClusterSet, KernelConfig, gather_clusters, load_clusters, save_clusters
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "nll", "kl", "mmd", "log_j_raw", "log_j_reg", "ppl", "mi"]
EXTRA_COLUMNS = ["phase", "phase_epoch", "alpha", "lambda", "beta", "rec", "mi_se", "train_nll", "train_loss"]
CSV_COLUMNS = METRIC_COLUMNS + EXTRA_COLUMNS


@dataclass
class Datasets:
    vocab: Vocab
    train: Corpus
    dev: Corpus
    test: Corpus | None


def load_datasets(cfg: RunConfig, vocab: Vocab | None = None) -> Datasets:
    """Corpora from ``cfg.data_dir``, or the synthetic grammar when it is empty."""
    if not cfg.data_dir:
        n = cfg.synthetic_size
        train = synthetic_grammar(n, cfg.data_seed, "train")
        dev = synthetic_grammar(max(n // 10, 2), cfg.data_seed + 1, "dev")
        test = synthetic_grammar(max(n // 10, 2), cfg.data_seed + 2, "test")
        return Datasets(train.vocab, train, dev, test)
    train_path = find_split_file(cfg.data_dir, "train")
    dev_path = find_split_file(cfg.data_dir, "dev")
    if train_path is None or dev_path is None:
        raise ConfigError(f"{cfg.data_dir}: needs train.txt and dev.txt (or valid.txt)")
    if vocab is None:
        with open(train_path, encoding="utf-8") as fh:
            vocab = build_vocab(fh, cap=cfg.vocab_cap)
    test_path = find_split_file(cfg.data_dir, "test")
    return Datasets(vocab, load_corpus(train_path, vocab, "train"), load_corpus(dev_path, vocab, "dev"),
                    load_corpus(test_path, vocab, "test") if test_path else None)


def build_model(cfg: RunConfig, vocab_size: int) -> TextVAE:
    return TextVAE(vocab_size, latent=cfg.latent, hidden=cfg.hidden, embed=cfg.embed,
                   n_flows=cfg.n_flows if cfg.uses_flows else 0, dropout=cfg.dropout,
                   injection=cfg.injection, mlp_hidden=cfg.mlp_hidden, seed=cfg.seed)


def kernel_config(cfg: RunConfig) -> KernelConfig:
    return KernelConfig(kind=cfg.kernel, d=cfg.latent, beta=cfg.rbf_beta)


def _batches(c: Corpus, batch_size: int):
    for start in range(0, len(c), batch_size):
        yield start, make_batch(c.sentences[start : start + batch_size])


def posterior_means(model: TextVAE, c: Corpus, batch_size: int = 64) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate([model.encode(b, train=False).mu.data for _, b in _batches(c, batch_size)])


def evaluate(model: TextVAE, c: Corpus, cfg: RunConfig, clusters: ClusterSet | None = None,
             use_flows: bool = True, batch_size: int | None = None) -> dict[str, float | None]:
    """Eval-mode metrics on a split.

    ``nll`` is the per-sentence negative flow ELBO (raw log-dets), ``kl`` its
    KL part, ``ppl = exp(sum of bounds / (words + EOS))``.  All noise is drawn
    up front from a fixed seed, so results do not depend on ``batch_size``.
    """
    batch_size = batch_size or cfg.eval_batch_size
    rng = np.random.default_rng([cfg.seed, 104729])
    n = len(c)
    eps = rng.standard_normal((n, model.latent))
    n_mmd = min(n, cfg.mmd_eval_max)
    prior = rng.standard_normal((n_mmd, model.latent))
    mi_rng = np.random.default_rng(rng.integers(2**63))
    flows_on = use_flows and len(model.flows) > 0
    parts = []
    for start, batch in _batches(c, batch_size):
        parts.append(sentence_terms(model, batch, eps[start : start + batch.size], flows_on,
                                    clusters if flows_on else None, kernel_config(cfg)))
    rec = np.concatenate([p.rec_nll for p in parts])
    kl = np.concatenate([p.kl for p in parts])
    z0 = np.concatenate([p.z0 for p in parts])
    mu = np.concatenate([p.mu for p in parts])
    log_sigma = np.concatenate([p.log_sigma for p in parts])
    bound = rec + kl
    row: dict[str, float | None] = {
        "nll": float(np.mean(bound)),
        "kl": float(np.mean(kl)),
        "rec": float(np.mean(rec)),
        "ppl": math.exp(float(np.sum(bound)) / c.n_predicted),
        "log_j_raw": float(np.mean(np.concatenate([p.raw_logdet for p in parts]))) if flows_on else None,
        "log_j_reg": (float(np.mean(np.concatenate([p.reg_logdet for p in parts])))
                      if flows_on and clusters is not None else None),
    }
    with ag.no_grad():
        row["mmd"] = float(mmd_gaussian(Tensor(z0[:n_mmd]), Tensor(prior)).data) if n_mmd >= 2 else None
    n_mi = min(n, cfg.mi_batch)
    mi = mutual_information_from_posteriors(mu[:n_mi], log_sigma[:n_mi], m=cfg.mi_samples, rng=mi_rng)
    row["mi"] = mi.value
    row["mi_se"] = mi.stderr
    return row


def format_table_row(row: dict) -> str:
    """``NLL (KL) PPL`` in the usual language-model table layout."""
    return f"{row['nll']:.1f} ({row['kl']:.2f}) {row['ppl']:.1f}"


def sample(model: TextVAE, vocab: Vocab, n: int, seed: int = 0, mode: str = "greedy",
           temperature: float = 1.0, max_len: int = 50) -> list[str]:
    """Decode ``n`` sentences from prior draws pushed through the flow stack."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.latent))
    with ag.no_grad():
        z_img, _ = stack_forward(model.flows, Tensor(z))
    ids = model.decode_sample(z_img.data, max_len=max_len, mode=mode, temperature=temperature, rng=rng)
    return [" ".join(vocab.decode(s)) for s in ids]


def distinct_ratio(sentences: list[str]) -> float:
    return len(set(sentences)) / len(sentences) if sentences else 0.0


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Trainer:
    """Owns the model, optimizer, RNG and batch stream of one run."""

    def __init__(self, cfg: RunConfig, data: Datasets | None = None, out_dir=None, write_files: bool = True,
                 clusters: ClusterSet | None = None):
        self.cfg = cfg
        self.data = data if data is not None else load_datasets(cfg)
        self.model = build_model(cfg, len(self.data.vocab))
        self.params = self.model.parameters()
        self.optimizer = Adam(self.params, lr=cfg.lr)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.stream = BatchStream(self.data.train, cfg.batch_size, cfg.seed)
        self.kernel = kernel_config(cfg)
        self.clusters = clusters
        if self.clusters is None and cfg.objective == "wae-rnf" and cfg.cluster_path:
            if not Path(cfg.cluster_path).exists():
                raise ConfigError(f"cluster artifact {cfg.cluster_path!r} does not exist")
            self.clusters = load_clusters(cfg.cluster_path)
        if self.clusters is not None:
            if self.clusters.dim != cfg.latent:
                raise ConfigError(f"cluster dimension {self.clusters.dim} does not match latent {cfg.latent}")
        self.schedule = AnnealSchedule(0.0, cfg.alpha_end, cfg.ramp_epochs, cfg.lambda_base)
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0
        self.best_dev = math.inf
        self.best_epoch = -1
        self.rows: list[dict] = []
        self.acc = {"nll": 0.0, "loss": 0.0, "n": 0}
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out)
        self.write_files = write_files
        self.n_clipped = 0

    # -- schedule ----------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return self.cfg.steps_per_epoch or math.ceil(len(self.data.train) / self.cfg.batch_size)

    @property
    def phase(self) -> str:
        return "pretrain" if self.epoch < self.cfg.pretrain_epochs else "main"

    @property
    def phase_epoch(self) -> int:
        return self.epoch - (self.cfg.pretrain_epochs if self.phase == "main" else 0)

    @property
    def uses_elbo(self) -> bool:
        return self.phase == "pretrain" or self.cfg.objective in ("vae", "vae-nf")

    def weights(self) -> dict[str, float]:
        if self.uses_elbo:
            ramp = 1.0
            if self.cfg.kl_schedule == "anneal":
                ramp = min(1.0, self.phase_epoch / self.cfg.ramp_epochs) if self.cfg.ramp_epochs > 0 else 1.0
            return {"beta": self.cfg.kl_weight * ramp}
        alpha, lam = anneal(self.phase_epoch, self.schedule)
        return {"alpha": alpha, "lambda": lam}

    # -- optimization ------------------------------------------------------
    def _loss(self, batch, noise):
        w = self.weights()
        if self.phase == "pretrain":
            return elbo(self.model, batch, noise, w["beta"], train=True, bypass_flows=True)
        obj = self.cfg.objective
        if obj == "vae":
            return elbo(self.model, batch, noise, w["beta"], train=True)
        if obj == "vae-nf":
            return flow_elbo(self.model, batch, noise, w["beta"], train=True)
        clusters = self.clusters if obj == "wae-rnf" else None
        return wae_rnf_loss(self.model, batch, noise, w["alpha"], w["lambda"], clusters,
                            self.kernel if clusters is not None else None, train=True)

    def step(self):
        """One Adam update on the next training batch."""
        needs_prior = not self.uses_elbo
        batch = self.stream.next()
        if needs_prior and batch.size < 2:
            batch = self.stream.next()
        noise = StepNoise.draw(self.rng, batch.size, self.cfg.latent,
                               prior_samples=batch.size if needs_prior else 0, dropout=self.cfg.dropout > 0)
        self.optimizer.zero_grad()
        try:
            lb = self._loss(batch, noise)
            ag.backward(lb.total)
        except (NonFiniteError, SingularFlowError) as exc:
            raise NumericalAbort(f"epoch {self.epoch} step {self.step_in_epoch}: {exc}") from exc
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalAbort(f"epoch {self.epoch} step {self.step_in_epoch}: non-finite gradient in {name}")
        if clip_grad_norm(self.params, self.cfg.clip) > self.cfg.clip:
            self.n_clipped += 1
        self.optimizer.step()
        self.step_in_epoch += 1
        self.global_step += 1
        self.acc["nll"] += float(lb.nll.data)
        self.acc["loss"] += float(lb.total.data)
        self.acc["n"] += 1
        return lb

    # -- epochs ------------------------------------------------------------
    def end_epoch(self) -> dict:
        phase, phase_epoch, w = self.phase, self.phase_epoch, self.weights()
        flows_active = phase == "main" and len(self.model.flows) > 0
        row: dict = {"epoch": self.epoch}
        row.update(evaluate(self.model, self.data.dev, self.cfg, self.clusters, use_flows=flows_active))
        n = max(self.acc["n"], 1)
        row.update({"phase": phase, "phase_epoch": phase_epoch, "alpha": w.get("alpha"),
                    "lambda": w.get("lambda"), "beta": w.get("beta"),
                    "train_nll": self.acc["nll"] / n, "train_loss": self.acc["loss"] / n})
        self.rows.append(row)
        log.info("epoch %d [%s] dev %s  mi %.3f  train nll %.3f", self.epoch, phase, format_table_row(row),
                 row["mi"], row["train_nll"])
        if self.n_clipped:
            log.debug("epoch %d: gradient clipping triggered on %d steps", self.epoch, self.n_clipped)
        improved = phase == "main" or self.cfg.pretrain_epochs == 0
        improved = improved and row["nll"] < self.best_dev
        if improved:
            self.best_dev, self.best_epoch = row["nll"], self.epoch
        if phase == "pretrain" and self.epoch + 1 == self.cfg.pretrain_epochs:
            self.clusters = gather_clusters(posterior_means(self.model, self.data.train), self.cfg.n_clusters,
                                            seed=self.cfg.seed)
            log.info("gathered %d clusters from pre-trained posterior means", self.clusters.K)
            if self.write_files:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                save_clusters(self.clusters, self.out_dir / "clusters.bin")
        self.epoch += 1
        self.step_in_epoch = 0
        self.acc = {"nll": 0.0, "loss": 0.0, "n": 0}
        self.n_clipped = 0
        if self.write_files:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.write_metrics(self.out_dir / "metrics.csv")
            self.save(self.out_dir / "last.ckpt")
            if improved:
                self.save(self.out_dir / "best.ckpt")
        return row

    def run_epoch(self) -> dict:
        while self.step_in_epoch < self.steps_per_epoch:
            self.step()
        return self.end_epoch()

    def fit(self) -> list[dict]:
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
        return self.rows

    def best_row(self) -> dict | None:
        for row in self.rows:
            if row["epoch"] == self.best_epoch:
                return row
        return None

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])

    # -- persistence -------------------------------------------------------
    def state_blocks(self) -> dict[str, np.ndarray]:
        blocks = {f"param.{k}": p.data for k, p in self.params.items()}
        blocks.update({f"buffer.{k}": v for k, v in self.model.buffers().items()})
        blocks.update({f"adam.m.{k}": v for k, v in self.optimizer.m.items()})
        blocks.update({f"adam.v.{k}": v for k, v in self.optimizer.v.items()})
        if self.clusters is not None:
            blocks["clusters"] = self.clusters.centers
        return blocks

    def state_meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(), "epoch": self.epoch, "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step, "adam_t": self.optimizer.t,
            "rng": self.rng.bit_generator.state, "stream": self.stream.state(),
            "best_dev": self.best_dev, "best_epoch": self.best_epoch, "acc": self.acc,
            "n_clipped": self.n_clipped, "rows": self.rows, "vocab": self.data.vocab.itos,
        }

    def save(self, path) -> None:
        write_checkpoint(path, self.state_meta(), self.state_blocks())

    @classmethod
    def load(cls, path, data: Datasets | None = None, out_dir=None, write_files: bool = True) -> "Trainer":
        meta, blocks = read_checkpoint(path)
        cfg = RunConfig(**meta["config"])
        if data is None:
            data = load_datasets(cfg, vocab=Vocab(meta["vocab"]))
        # cluster centers travel inside the checkpoint
        clusters = ClusterSet(blocks["clusters"]) if "clusters" in blocks else None
        trainer = cls(cfg, data, out_dir=out_dir, write_files=write_files, clusters=clusters)
        trainer.restore(meta, blocks)
        return trainer

    def restore(self, meta: dict, blocks: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = blocks[f"param.{k}"]
        for k, buf in self.model.buffers().items():
            buf[...] = blocks[f"buffer.{k}"]
        for k in self.params:
            self.optimizer.m[k][...] = blocks[f"adam.m.{k}"]
            self.optimizer.v[k][...] = blocks[f"adam.v.{k}"]
        self.optimizer.t = int(meta["adam_t"])
        self.rng.bit_generator.state = meta["rng"]
        self.stream.load_state(meta["stream"])
        self.epoch = int(meta["epoch"])
        self.step_in_epoch = int(meta["step_in_epoch"])
        self.global_step = int(meta["global_step"])
        self.best_dev = float(meta["best_dev"])
        self.best_epoch = int(meta["best_epoch"])
        self.acc = dict(meta["acc"])
        self.n_clipped = int(meta["n_clipped"])
        self.rows = list(meta["rows"])
