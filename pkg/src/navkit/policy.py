"""Transformer actor-critic with per-axis Beta action heads.

The network consumes the observation triplet as a fixed sequence of 12
tokens: one learned CLS token, one static-obstacle token from a small
CNN over the 36x4 closeness map, five dynamic-history tokens (one per
0.5 s timestamp), and five internal-state tokens. The CLS output feeds
separate actor and critic MLPs; the actor emits softplus(x)+1 so both
Beta parameters stay >= 1 and the action density has no boundary spikes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import codec as C
from . import nn
from . import tensor as T

N_TOKENS = 12


@dataclass
class PolicyConfig:
    dim: int = 2
    v_max: float = 2.0
    embed: int = 64
    heads: int = 4
    layers: int = 4
    ff: int = 128
    dropout: float = 0.1
    token_hidden: int = 128  # token projection MLP is [token_hidden, embed]
    head_hidden: tuple = (256, 256)
    cnn_channels: tuple = (4, 16, 16)
    n_slots: int = C.MAX_DYN_SLOTS
    history: int = C.HISTORY_SAMPLES

    @property
    def dyn_token_in(self):
        # per-timestamp slot features plus one validity bit per slot
        return self.n_slots * (C.DYN_FEATURES + 1)

    @property
    def internal_token_in(self):
        return 2 * self.dim + 1


def pack_observations(obs: C.ObservationSet):
    """ObservationSet -> plain array dict consumed by the policy."""
    return {
        "static": obs.static.closeness,
        "dyn": obs.dyn,
        "dyn_mask": obs.dyn_mask.astype(float),
        "internal": obs.internal,
    }


class StaticEncoder(nn.Module):
    """Three 3x3 convs (circular padding over azimuth) with pooling to a flat feature."""

    def __init__(self, channels, rng):
        c1, c2, c3 = channels
        self.conv1 = nn.Conv2d(1, c1, rng)
        self.conv2 = nn.Conv2d(c1, c2, rng)
        self.conv3 = nn.Conv2d(c2, c3, rng)
        self.out_dim = c3 * (C.N_AZIMUTH // 4) * (C.N_ELEVATION // 4)

    def __call__(self, x):
        e = x.shape[0]
        h = T.reshape(x, (e, 1, C.N_AZIMUTH, C.N_ELEVATION))
        h = T.gelu(self.conv1(h))
        h = T.gelu(self.conv2(h))
        h = T.avg_pool2d(h, 2, 2)
        h = T.gelu(self.conv3(h))
        h = T.avg_pool2d(h, 2, 2)
        return T.reshape(h, (e, self.out_dim))


class BetaPolicy(nn.Module):
    """Maps packed observations to Beta action parameters and a value."""

    def __init__(self, config: PolicyConfig = None, seed: int = 0):
        cfg = config or PolicyConfig()
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.static_encoder = StaticEncoder(cfg.cnn_channels, rng)
        self.static_proj = nn.MLP([self.static_encoder.out_dim, cfg.token_hidden, cfg.embed], rng)
        self.dyn_proj = nn.MLP([cfg.dyn_token_in, cfg.token_hidden, cfg.embed], rng)
        self.internal_proj = nn.MLP([cfg.internal_token_in, cfg.token_hidden, cfg.embed], rng)
        self.cls_token = T.parameter(rng.normal(0.0, 0.02, size=(1, 1, cfg.embed)))
        self.positional = T.parameter(rng.normal(0.0, 0.02, size=(1, N_TOKENS, cfg.embed)))
        self.blocks = [nn.TransformerLayer(cfg.embed, cfg.heads, cfg.ff, cfg.dropout, rng)
                       for _ in range(cfg.layers)]
        self.final_norm = nn.LayerNorm(cfg.embed)
        self.actor = nn.MLP([cfg.embed, *cfg.head_hidden, 2 * cfg.dim], rng)
        self.critic = nn.MLP([cfg.embed, *cfg.head_hidden, 1], rng)

    # -- forward --------------------------------------------------------
    def _check_shapes(self, packed):
        cfg = self.config
        e = packed["static"].shape[0]
        expected = {
            "static": (e, C.N_AZIMUTH, C.N_ELEVATION),
            "dyn": (e, cfg.n_slots, cfg.history, C.DYN_FEATURES),
            "dyn_mask": (e, cfg.n_slots, cfg.history),
            "internal": (e, cfg.history, cfg.internal_token_in),
        }
        for key, shape in expected.items():
            if tuple(packed[key].shape) != shape:
                raise T.ShapeError(f"policy input {key}", packed[key].shape, shape)

    def tokens(self, packed):
        cfg = self.config
        self._check_shapes(packed)
        e = packed["static"].shape[0]
        k = cfg.history

        static_tok = self.static_proj(self.static_encoder(T.Tensor(packed["static"])))
        static_tok = T.reshape(static_tok, (e, 1, cfg.embed))

        dyn = np.concatenate(
            [np.transpose(packed["dyn"], (0, 2, 1, 3)).reshape(e, k, -1),
             np.transpose(packed["dyn_mask"], (0, 2, 1))], axis=2)
        dyn_tok = self.dyn_proj(T.Tensor(dyn))

        int_tok = self.internal_proj(T.Tensor(packed["internal"]))

        cls = T.add(T.Tensor(np.zeros((e, 1, cfg.embed))), self.cls_token)
        seq = T.concat([cls, static_tok, dyn_tok, int_tok], axis=1)
        return T.add(seq, self.positional)

    def forward(self, packed, train=False, rng=None):
        """Returns (alpha, beta, value) tensors; alpha/beta are (E, dim)."""
        x = self.tokens(packed)
        for block in self.blocks:
            x = block(x, rng=rng, train=train)
        x = self.final_norm(x)
        cls = x[:, 0]
        raw = self.actor(cls)
        ab = T.add(T.softplus(raw), 1.0)
        alpha = ab[:, :self.config.dim]
        beta = ab[:, self.config.dim:]
        value = self.critic(cls)[:, 0]
        return alpha, beta, value

    # -- action utilities ------------------------------------------------
    def act(self, packed, rng, deterministic=False):
        """Sample (or take the mean of) the Beta action; returns numpy arrays."""
        with T.no_grad():
            alpha, beta, value = self.forward(packed, train=False)
        a, b = alpha.data, beta.data
        if deterministic:
            v_hat = beta_mean(a, b)
        else:
            v_hat = rng.beta(a, b)
        logp = beta_log_prob_np(a, b, v_hat)
        return v_hat, logp, value.data.copy()

    def executable_velocity(self, v_hat):
        return self.config.v_max * (2.0 * v_hat - 1.0)

    def describe(self):
        lines = []
        for name, p in self.named_parameters():
            lines.append(f"{name:55s} {str(tuple(p.shape)):18s} {p.size}")
        lines.append(f"{'total parameters':55s} {'':18s} {self.parameter_count()}")
        return "\n".join(lines)


# -- Beta distribution ----------------------------------------------------

def beta_mean(alpha, beta):
    return alpha / (alpha + beta)


def _clamped(action):
    return np.clip(np.asarray(action), 1e-6, 1.0 - 1e-6)


def beta_log_prob_np(alpha, beta, action):
    """Summed per-axis Beta log-density (plain numpy, for rollouts)."""
    x = _clamped(action)
    ln_b = special.gammaln(alpha) + special.gammaln(beta) - special.gammaln(alpha + beta)
    per_axis = (alpha - 1.0) * np.log(x) + (beta - 1.0) * np.log(1.0 - x) - ln_b
    return per_axis.sum(axis=-1)


def beta_log_prob(alpha: T.Tensor, beta: T.Tensor, action):
    """Differentiable log-density of fixed actions under (alpha, beta)."""
    x = _clamped(action)
    ln_b = T.sub(T.add(T.lgamma(alpha), T.lgamma(beta)), T.lgamma(T.add(alpha, beta)))
    term = T.add(T.mul(T.sub(alpha, 1.0), np.log(x)), T.mul(T.sub(beta, 1.0), np.log1p(-x)))
    return T.sum_(T.sub(term, ln_b), axis=-1)


def beta_entropy(alpha: T.Tensor, beta: T.Tensor):
    """Summed per-axis differential entropy (differentiable)."""
    ln_b = T.sub(T.add(T.lgamma(alpha), T.lgamma(beta)), T.lgamma(T.add(alpha, beta)))
    h = T.sub(ln_b, T.mul(T.sub(alpha, 1.0), T.digamma(alpha)))
    h = T.sub(h, T.mul(T.sub(beta, 1.0), T.digamma(beta)))
    h = T.add(h, T.mul(T.sub(T.add(alpha, beta), 2.0), T.digamma(T.add(alpha, beta))))
    return T.sum_(h, axis=-1)


def beta_entropy_np(alpha, beta):
    ln_b = special.gammaln(alpha) + special.gammaln(beta) - special.gammaln(alpha + beta)
    h = (ln_b - (alpha - 1.0) * special.digamma(alpha) - (beta - 1.0) * special.digamma(beta)
         + (alpha + beta - 2.0) * special.digamma(alpha + beta))
    return h.sum(axis=-1)
