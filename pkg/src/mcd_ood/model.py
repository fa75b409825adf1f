"""Two-head classifier: a shared feature extractor feeding two linear heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class TwoHeadConfig:
    """Architecture and initialization seeds.

    ``extractor_spec`` lists hidden widths for a vector MLP (each linear
    layer followed by relu) or output channels of conv-relu-avgpool blocks
    for images (followed by global average pooling).
    """

    input_kind: str = "vector"
    input_shape: tuple = (2,)
    num_classes: int = 4
    extractor_spec: tuple = (64, 64)
    seed_extractor: int = 0
    seed_head1: int = 1
    seed_head2: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "extractor_spec", tuple(self.extractor_spec))
        self.validate()

    def validate(self):
        if self.input_kind not in ("vector", "image"):
            raise ConfigError(f"input_kind must be 'vector' or 'image', got {self.input_kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        want = 1 if self.input_kind == "vector" else 3
        if len(self.input_shape) != want or any(s < 1 for s in self.input_shape):
            raise ConfigError(f"input_shape {self.input_shape} invalid for {self.input_kind} input")
        if not self.extractor_spec:
            raise ConfigError("extractor_spec must contain at least one layer")
        for i, width in enumerate(self.extractor_spec):
            if not isinstance(width, (int, np.integer)) or isinstance(width, bool) or width < 1:
                raise ConfigError(f"extractor layer {i}: width must be a positive integer, got {width!r}")
        if self.seed_head1 == self.seed_head2:
            raise ConfigError("seed_head1 and seed_head2 must differ so the heads start apart")

    @property
    def head_width(self):
        return int(self.extractor_spec[-1])

    def to_dict(self):
        return {
            "input_kind": self.input_kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "extractor_spec": list(self.extractor_spec),
            "seed_extractor": self.seed_extractor,
            "seed_head1": self.seed_head1,
            "seed_head2": self.seed_head2,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class TwoHeadModel:
    config: TwoHeadConfig
    extractor: dict = field(default_factory=dict)
    head1: dict = field(default_factory=dict)
    head2: dict = field(default_factory=dict)

    def named_parameters(self):
        """Ordered ``(name, tensor)`` pairs; the order is the checkpoint order."""
        out = []
        for group, params in (("extractor", self.extractor), ("head1", self.head1), ("head2", self.head2)):
            out.extend((f"{group}.{k}", v) for k, v in params.items())
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_groups(self):
        return {
            "extractor": list(self.extractor.values()),
            "head1": list(self.head1.values()),
            "head2": list(self.head2.values()),
        }

    def num_parameters(self):
        return int(np.sum([t.size for t in self.parameters()]))

    def state(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state):
        for name, t in self.named_parameters():
            if name not in state:
                raise DimensionError(f"state is missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise DimensionError(f"{name}: expected shape {t.shape}, got {value.shape}")
            t.data[...] = value

    def copy(self):
        clone = init_model(self.config)
        clone.load_state(self.state())
        return clone

    # -- forward ---------------------------------------------------------

    def features(self, x):
        cfg = self.config
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        expect = (x.shape[0],) + cfg.input_shape
        if x.shape != expect:
            raise DimensionError(f"model expects batch shape (n, {', '.join(map(str, cfg.input_shape))}), got {x.shape}")
        h = x
        if cfg.input_kind == "vector":
            for i in range(len(cfg.extractor_spec)):
                h = ad.relu(ad.add_bias(ad.matmul(h, self.extractor[f"w{i}"]), self.extractor[f"b{i}"]))
            return h
        for i in range(len(cfg.extractor_spec)):
            h = ad.relu(ad.add_bias(ad.conv2d(h, self.extractor[f"k{i}"]), self.extractor[f"b{i}"]))
            if h.shape[2] >= 2 and h.shape[3] >= 2:
                h = ad.avgpool2d(h, 2)
        return ad.global_avgpool(h)

    def forward(self, x):
        """Return ``(logits1, logits2)``, both computed from one shared feature tensor."""
        feats = self.features(x)
        logits1 = ad.add_bias(ad.matmul(feats, self.head1["w"]), self.head1["b"])
        logits2 = ad.add_bias(ad.matmul(feats, self.head2["w"]), self.head2["b"])
        return logits1, logits2

    def probabilities(self, x):
        logits1, logits2 = self.forward(x)
        return ad.softmax(logits1), ad.softmax(logits2)

    def predict_proba(self, x, batch_size=1024):
        """Detached ``(p1, p2)`` numpy arrays, evaluated in chunks."""
        x = np.asarray(x, dtype=np.float64)
        p1, p2 = [], []
        for start in range(0, len(x), batch_size):
            a, b = self.probabilities(ad.Tensor(x[start:start + batch_size]))
            p1.append(a.data)
            p2.append(b.data)
        k = self.config.num_classes
        if not p1:
            return np.zeros((0, k)), np.zeros((0, k))
        return np.concatenate(p1), np.concatenate(p2)


def init_model(cfg):
    """Fan-in uniform weights from three independent seeds; zero biases."""
    cfg.validate()
    rng_e = np.random.default_rng(cfg.seed_extractor)
    extractor = {}
    if cfg.input_kind == "vector":
        fan_in = cfg.input_shape[0]
        for i, width in enumerate(cfg.extractor_spec):
            extractor[f"w{i}"] = ad.Tensor(_uniform(rng_e, (fan_in, width), fan_in), requires_grad=True)
            extractor[f"b{i}"] = ad.Tensor(np.zeros(width), requires_grad=True)
            fan_in = width
    else:
        cin = cfg.input_shape[0]
        for i, cout in enumerate(cfg.extractor_spec):
            fan_in = cin * 9
            extractor[f"k{i}"] = ad.Tensor(_uniform(rng_e, (cout, cin, 3, 3), fan_in), requires_grad=True)
            extractor[f"b{i}"] = ad.Tensor(np.zeros(cout), requires_grad=True)
            cin = cout

    def head(seed):
        rng = np.random.default_rng(seed)
        d, k = cfg.head_width, cfg.num_classes
        return {
            "w": ad.Tensor(_uniform(rng, (d, k), d), requires_grad=True),
            "b": ad.Tensor(np.zeros(k), requires_grad=True),
        }

    return TwoHeadModel(cfg, extractor, head(cfg.seed_head1), head(cfg.seed_head2))
