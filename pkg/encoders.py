#!/usr/bin/env python3
"""
Frozen text-encoder proxy, trainable image encoder and gaze regressor, with
hand-written backward passes. Parameters and their gradients live in a
ParameterSet keyed by name:

    context              (L-1, D_tok)   learnable prompt context
    anchors              (N, D_tok)     learnable anchor embeddings
    enc.w1 .. enc.b3                    image encoder, input -> hidden -> hidden -> D_feat
    reg.w, reg.b                        regressor, D_feat -> 3
    text.w1 .. text.b2   (frozen)       text proxy, L*D_tok -> D_feat -> D_feat
"""
import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet

import numpy as np

from anchors import build_anchor_grid
from constants import EMBEDDING_INIT_STD
from errors import ShapeError, InvariantError, DegenerateError, ConfigError
from geometry import normalize_rows

TRAINABLE = ('context', 'anchors', 'enc.w1', 'enc.b1', 'enc.w2', 'enc.b2', 'enc.w3', 'enc.b3', 'reg.w', 'reg.b')
FROZEN = ('text.w1', 'text.b1', 'text.w2', 'text.b2')


@dataclass
class ParameterSet:
    values: Dict[str, np.ndarray]
    frozen: FrozenSet[str] = frozenset(FROZEN)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.values = {k: np.asarray(v, dtype=np.float64) for k, v in self.values.items()}
        self.zero_grad()

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def trainable_names(self):
        return [k for k in self.values if k not in self.frozen]

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items() if k not in self.frozen}

    def accumulate(self, name, grad):
        if name in self.frozen:
            raise InvariantError(f'{name} is frozen and has no gradient slot')
        grad = np.asarray(grad)
        if grad.shape != self.values[name].shape:
            raise ShapeError(f'gradient for {name} has shape {grad.shape}, expected {self.values[name].shape}')
        self.grads[name] += grad

    def count(self, trainable=True) -> int:
        return int(sum(v.size for k, v in self.values.items() if (k not in self.frozen) == trainable))

    def copy(self):
        return ParameterSet({k: v.copy() for k, v in self.values.items()}, frozen=self.frozen)

    def max_abs_difference(self, other) -> float:
        return max(float(np.max(np.abs(self.values[k] - other.values[k]))) for k in self.values)

    def to_dict(self) -> dict:
        return {
            'frozen': sorted(self.frozen),
            'parameters': {k: {'shape': list(v.shape), 'values': v.ravel().tolist()}
                           for k, v in self.values.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict):
        try:
            values = {k: np.array(p['values'], dtype=np.float64).reshape(p['shape'])
                      for k, p in d['parameters'].items()}
            return cls(values, frozen=frozenset(d['frozen']))
        except KeyError as e:
            raise ConfigError('missing key in checkpoint', key_path=e.args[0]) from e
        except ValueError as e:
            raise ShapeError(f'checkpoint tensor does not match its shape: {e}') from e

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


@dataclass
class PromptSequence:
    context: np.ndarray
    gaze_token: np.ndarray

    def __post_init__(self):
        if self.context.ndim != 2 or self.gaze_token.shape != (self.context.shape[1],):
            raise ShapeError(f'context {self.context.shape} and gaze token {self.gaze_token.shape} do not fit')

    @property
    def length(self):
        return self.context.shape[0] + 1

    def tokens(self) -> np.ndarray:
        return np.vstack([self.context, self.gaze_token[None, :]])


def xavier(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_parameters(config, seed=None) -> ParameterSet:
    """
    Trainable tensors from `seed` (config.init_seed by default), frozen proxy from config.proxy_seed.
    """
    seed = config.init_seed if seed is None else seed
    anchor_set = build_anchor_grid(config.yaw_step, config.pitch_step, config.token_dim, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    d_in, d_hid, d_feat, d_tok = config.input_dim, config.hidden_dim, config.feature_dim, config.token_dim
    values = {
        'context': rng.normal(0.0, EMBEDDING_INIT_STD, size=(config.context_length - 1, d_tok)),
        'anchors': anchor_set.embeddings,
        'enc.w1': xavier(rng, d_in, d_hid),
        'enc.b1': np.zeros(d_hid),
        'enc.w2': xavier(rng, d_hid, d_hid),
        'enc.b2': np.zeros(d_hid),
        'enc.w3': xavier(rng, d_hid, d_feat),
        'enc.b3': np.zeros(d_feat),
        'reg.w': xavier(rng, d_feat, 3),
        'reg.b': np.zeros(3),
    }
    proxy = np.random.default_rng(np.random.SeedSequence(config.proxy_seed))
    flat = config.context_length * d_tok
    values.update({
        'text.w1': xavier(proxy, flat, d_feat),
        'text.b1': np.zeros(d_feat),
        'text.w2': xavier(proxy, d_feat, d_feat),
        'text.b2': np.zeros(d_feat),
    })
    return ParameterSet(values)


def l2_normalize(h, name='feature'):
    return normalize_rows(h, name)


def l2_normalize_backward(d_unit, unit, norms):
    return (d_unit - unit * np.sum(d_unit * unit, axis=-1, keepdims=True)) / norms


class ImageEncoder:
    @staticmethod
    def forward(x, params: ParameterSet):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != params['enc.w1'].shape[0]:
            raise ShapeError(f'image input has dimension {x.shape[1]}, expected {params["enc.w1"].shape[0]}')
        h1 = np.tanh(x @ params['enc.w1'] + params['enc.b1'])
        h2 = np.tanh(h1 @ params['enc.w2'] + params['enc.b2'])
        out = h2 @ params['enc.w3'] + params['enc.b3']
        try:
            f, norms = l2_normalize(out, 'image feature')
        except DegenerateError as e:
            raise DegenerateError(f'degenerate image feature: {e}') from e
        return f, (x, h1, h2, f, norms)

    @staticmethod
    def backward(d_f, cache, params: ParameterSet):
        x, h1, h2, f, norms = cache
        d_out = l2_normalize_backward(d_f, f, norms)
        params.accumulate('enc.w3', h2.T @ d_out)
        params.accumulate('enc.b3', d_out.sum(axis=0))
        d_z2 = (d_out @ params['enc.w3'].T) * (1.0 - h2 * h2)
        params.accumulate('enc.w2', h1.T @ d_z2)
        params.accumulate('enc.b2', d_z2.sum(axis=0))
        d_z1 = (d_z2 @ params['enc.w2'].T) * (1.0 - h1 * h1)
        params.accumulate('enc.w1', x.T @ d_z1)
        params.accumulate('enc.b1', d_z1.sum(axis=0))
        return d_z1 @ params['enc.w1'].T


class Regressor:
    @staticmethod
    def forward_raw(f, params: ParameterSet):
        f = np.atleast_2d(f)
        return f @ params['reg.w'] + params['reg.b'], f

    @staticmethod
    def backward_raw(d_raw, f, params: ParameterSet):
        params.accumulate('reg.w', f.T @ d_raw)
        params.accumulate('reg.b', d_raw.sum(axis=0))
        return d_raw @ params['reg.w'].T

    @staticmethod
    def predict(f, params: ParameterSet):
        raw, _ = Regressor.forward_raw(f, params)
        try:
            pred, _ = normalize_rows(raw, 'gaze prediction')
        except DegenerateError as e:
            raise DegenerateError(f'degenerate prediction: {e}') from e
        return pred


class TextProxy:
    """
    Frozen stand-in for a language model: flatten -> affine -> tanh -> affine -> L2-normalize.
    Gradients flow to the input tokens only.
    """

    @staticmethod
    def forward(tokens, params: ParameterSet):
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        n, length, d_tok = tokens.shape
        if length * d_tok != params['text.w1'].shape[0]:
            raise ShapeError(f'prompt of {length} x {d_tok} tokens does not fit a proxy expecting '
                             f'{params["text.w1"].shape[0]} inputs')
        flat = tokens.reshape(n, length * d_tok)
        h = np.tanh(flat @ params['text.w1'] + params['text.b1'])
        out = h @ params['text.w2'] + params['text.b2']
        f, norms = l2_normalize(out, 'text feature')
        return f, (tokens.shape, h, f, norms)

    @staticmethod
    def backward(d_f, cache, params: ParameterSet):
        shape, h, f, norms = cache
        d_out = l2_normalize_backward(d_f, f, norms)
        d_z = (d_out @ params['text.w2'].T) * (1.0 - h * h)
        return (d_z @ params['text.w1'].T).reshape(shape)


def text_encoder_forward(seq: PromptSequence, params: ParameterSet) -> np.ndarray:
    f, _ = TextProxy.forward(seq.tokens(), params)
    return f[0]


def image_encoder_forward(x, params: ParameterSet) -> np.ndarray:
    f, _ = ImageEncoder.forward(x, params)
    return f[0] if np.ndim(x) == 1 else f


def regressor_forward(f, params: ParameterSet) -> np.ndarray:
    pred = Regressor.predict(f, params)
    return pred[0] if np.ndim(f) == 1 else pred


def build_prompts(context, gaze_tokens) -> np.ndarray:
    """(n, L, D_tok) prompt batch: shared context followed by each gaze token."""
    n = len(gaze_tokens)
    context = np.broadcast_to(context, (n,) + context.shape)
    return np.concatenate([context, gaze_tokens[:, None, :]], axis=1)


def encode_prompts(params: ParameterSet, weights):
    """
    Text features for prompts whose gaze tokens are interpolated with the dense
    weight rows `weights` (n, N) over params['anchors'].
    """
    gaze_tokens = weights @ params['anchors']
    f, cache = TextProxy.forward(build_prompts(params['context'], gaze_tokens), params)
    return f, (weights, cache)


def encode_prompts_backward(d_f, cache, params: ParameterSet):
    weights, text_cache = cache
    d_tokens = TextProxy.backward(d_f, text_cache, params)
    params.accumulate('context', d_tokens[:, :-1, :].sum(axis=0))
    params.accumulate('anchors', weights.T @ d_tokens[:, -1, :])
