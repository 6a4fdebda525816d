"""LSTM encoder/decoder with batch-normalized Gaussian posterior heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, Batch, MAX_LEN
from .divergences import DiagGaussian
from .errors import ContractError, VocabularyError
from .flows import FlowStack

INJECTION_MODES = ("init-state", "init-state+concat")


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Module:
    """Minimal parameter container: subclasses list their tensors and children."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update({f"{name}.{k}": v for k, v in value.parameters().items()})
            elif isinstance(value, FlowStack):
                out.update({f"{name}.{k}": v for k, v in value.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in vars(self).items():
            if isinstance(value, Module):
                out.update({f"{name}.{k}": v for k, v in value.buffers().items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _param(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = _param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    """Batch normalization over the leading axis with running statistics."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            n = x.shape[0]
            mean = ag.mean(x, axis=0)
            centered = x - mean
            var = ag.mean(ag.square(centered), axis=0)
            unbiased = var.data * n / (n - 1) if n > 1 else var.data
            # in-place so checkpoint buffers stay aliased
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean.data
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
            xhat = centered / ag.sqrt(var + self.eps)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xhat * self.gamma + self.beta


class MLPHead(Module):
    """Two fully connected layers (tanh hidden) followed by batch norm."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)
        self.bn = BatchNorm(n_out)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return self.bn(self.fc2(ag.tanh(self.fc1(x))), train)


class PosteriorHead(Module):
    def __init__(self, n_in: int, latent: int, rng: np.random.Generator, n_hidden: int = 200):
        self.mlp_mu = MLPHead(n_in, n_hidden, latent, rng)
        self.mlp_sigma = MLPHead(n_in, n_hidden, latent, rng)

    def __call__(self, h: Tensor, train: bool) -> DiagGaussian:
        return DiagGaussian(self.mlp_mu(h, train), self.mlp_sigma(h, train))


class LSTM(Module):
    """Single-layer LSTM; gate columns are ordered input, forget, output, cell."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, init_scale: float = 0.1):
        self.hidden = hidden
        self.w_ih = _param(rng.uniform(-init_scale, init_scale, (n_in, 4 * hidden)))
        self.w_hh = _param(rng.uniform(-init_scale, init_scale, (hidden, 4 * hidden)))
        self.bias = _param(np.zeros(4 * hidden))

    def project_inputs(self, x: Tensor) -> Tensor:
        """Input contribution to the gates for a whole ``(B, T, n_in)`` sequence."""
        return ag.matmul(x, self.w_ih) + self.bias

    def cell(self, gates_in: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.hidden
        gates = gates_in + ag.matmul(h, self.w_hh)
        sig = ag.sigmoid(gates[:, : 3 * H])
        g = ag.tanh(gates[:, 3 * H :])
        c_new = sig[:, H : 2 * H] * c + sig[:, :H] * g
        h_new = sig[:, 2 * H : 3 * H] * ag.tanh(c_new)
        return h_new, c_new


def _trim(batch: Batch) -> Batch:
    width = int(batch.lengths.max()) if batch.size else 0
    return Batch(batch.ids[:, :width], batch.mask[:, :width], batch.lengths)


@dataclass
class DecoderConfig:
    injection: str = "init-state+concat"
    dropout: float = 0.2
    embed: int = 200

    def __post_init__(self):
        if self.injection not in INJECTION_MODES:
            raise ContractError(f"unknown latent injection mode {self.injection!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout rate must lie in [0, 1)")


@dataclass
class DecodeOutput:
    token_ll: Tensor  # (B, T+1), zero at padded positions
    sentence_ll: Tensor  # (B,)
    n_tokens: int


class TextVAE(Module):
    """Sequence VAE: LSTM encoder -> Gaussian posterior -> flows -> LSTM decoder."""

    def __init__(self, vocab_size: int, latent: int = 32, hidden: int = 200, embed: int = 200,
                 n_flows: int = 0, dropout: float = 0.2, injection: str = "init-state+concat",
                 mlp_hidden: int = 200, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.latent = latent
        self.hidden = hidden
        self.decoder_cfg = DecoderConfig(injection, dropout, embed)
        self.embedding = _param(rng.uniform(-0.1, 0.1, (vocab_size, embed)))
        self.encoder = LSTM(embed, hidden, rng)
        self.head = PosteriorHead(hidden, latent, rng, mlp_hidden)
        self.flows = FlowStack.random(n_flows, latent, rng) if n_flows else FlowStack()
        self.latent_to_state = Linear(latent, 2 * hidden, rng)
        self.decoder = LSTM(embed, hidden, rng)
        if injection == "init-state+concat":
            self.latent_to_gates = _param(rng.uniform(-0.1, 0.1, (latent, 4 * hidden)))
        self.out = Linear(hidden, vocab_size, rng)

    # -- helpers -----------------------------------------------------------
    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        rate = self.decoder_cfg.dropout
        if rng is None or rate == 0.0:
            return x
        mask = (rng.random(x.shape) >= rate).astype(np.float64)
        return ag.dropout_apply(x, mask, rate)

    def _embed(self, ids: np.ndarray) -> Tensor:
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {self.vocab_size}")
        return ag.embedding(self.embedding, ids)

    # -- encoder -----------------------------------------------------------
    def encode(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> DiagGaussian:
        """Posterior parameters from the encoder state at each sentence's last word.

        ``rng`` supplies dropout masks; pass ``None`` for no dropout.
        """
        batch = _trim(batch)
        B, T = batch.ids.shape
        x = self._dropout(self._embed(batch.ids), rng)
        gates_in = self.encoder.project_inputs(x)
        h = Tensor(np.zeros((B, self.hidden)))
        c = Tensor(np.zeros((B, self.hidden)))
        for t in range(T):
            h_new, c_new = self.encoder.cell(gates_in[:, t], h, c)
            m = batch.mask[:, t : t + 1]
            if m.all():
                h, c = h_new, c_new
            else:
                h = h_new * m + h * (1.0 - m)
                c = c_new * m + c * (1.0 - m)
        return self.head(h, train)

    # -- decoder -----------------------------------------------------------
    def initial_state(self, z: Tensor) -> tuple[Tensor, Tensor]:
        state = self.latent_to_state(z)
        return state[:, : self.hidden], state[:, self.hidden :]

    def decode_teacher_forced(self, z: Tensor, batch: Batch,
                              rng: np.random.Generator | None = None) -> DecodeOutput:
        """Per-token log-likelihood of ``batch`` (targets: words then EOS) given ``z``."""
        batch = _trim(batch)
        B, T = batch.ids.shape
        inputs = np.concatenate([np.full((B, 1), BOS_ID), batch.ids], axis=1)
        targets = np.concatenate([batch.ids, np.full((B, 1), PAD_ID)], axis=1)
        targets[np.arange(B), batch.lengths] = EOS_ID
        tmask = np.zeros((B, T + 1))
        tmask[np.arange(T + 1)[None, :] <= batch.lengths[:, None]] = 1.0

        x = self._dropout(self._embed(inputs), rng)
        gates_in = self.decoder.project_inputs(x)
        if self.decoder_cfg.injection == "init-state+concat":
            zg = ag.matmul(z, self.latent_to_gates)
            gates_in = gates_in + ag.reshape(zg, (B, 1, 4 * self.hidden))
        h, c = self.initial_state(z)
        outs = []
        for t in range(T + 1):
            h, c = self.decoder.cell(gates_in[:, t], h, c)
            outs.append(ag.reshape(h, (B, 1, self.hidden)))
        hs = self._dropout(ag.concat(outs, axis=1), rng)
        logp = ag.log_softmax(self.out(hs), axis=-1)
        picked = logp[np.arange(B)[:, None], np.arange(T + 1)[None, :], targets]
        token_ll = picked * tmask
        return DecodeOutput(token_ll, ag.sum_(token_ll, axis=1), int(tmask.sum()))

    def decode_sample(self, z, max_len: int = 50, mode: str = "greedy", temperature: float = 1.0,
                      rng: np.random.Generator | None = None) -> list[list[int]]:
        """Autoregressive decoding from BOS until EOS or ``max_len`` tokens."""
        if max_len > MAX_LEN:
            raise ContractError(f"max_len must be <= {MAX_LEN}")
        if mode not in ("greedy", "temperature"):
            raise ContractError(f"unknown decoding mode {mode!r}")
        if mode == "temperature" and rng is None:
            raise ContractError("temperature sampling needs an rng")
        z = np.atleast_2d(np.asarray(getattr(z, "data", z), dtype=np.float64))
        B = z.shape[0]
        out: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        with ag.no_grad():
            zt = Tensor(z)
            h, c = self.initial_state(zt)
            zg = ag.matmul(zt, self.latent_to_gates) if self.decoder_cfg.injection == "init-state+concat" else None
            prev = np.full(B, BOS_ID)
            for _ in range(max_len):
                gates_in = self.decoder.project_inputs(self._embed(prev))
                if zg is not None:
                    gates_in = gates_in + zg
                h, c = self.decoder.cell(gates_in, h, c)
                logits = self.out(h).data.copy()
                logits[:, [PAD_ID, BOS_ID]] = -np.inf  # never targets, never emitted
                if mode == "greedy":
                    nxt = np.argmax(logits, axis=1)
                else:
                    scaled = logits / temperature
                    scaled = scaled - scaled.max(axis=1, keepdims=True)
                    probs = np.exp(scaled)
                    probs /= probs.sum(axis=1, keepdims=True)
                    cum = np.cumsum(probs, axis=1)
                    u = rng.random((B, 1))
                    nxt = np.minimum((cum < u * cum[:, -1:]).sum(axis=1), logits.shape[1] - 1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == EOS_ID:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
                if done.all():
                    break
                prev = nxt
        return out


def reparameterize(q: DiagGaussian, noise) -> Tensor:
    """``z = mu + sigma * eps``."""
    noise = np.asarray(getattr(noise, "data", noise), dtype=np.float64)
    if noise.shape != q.mu.shape:
        raise ContractError(f"noise shape {noise.shape} does not match posterior {q.mu.shape}")
    return q.mu + ag.exp(q.log_sigma) * noise
