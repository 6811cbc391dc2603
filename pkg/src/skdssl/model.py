"""Online, target and self-distillation networks.

Layout of parameter names::

    online.encoder.block{i}.conv.weight / .bn.gamma / .bn.beta
    online.projector.{fc1,bn,fc2}.*      online.predictor.*     online.skd_head.*
    target.encoder.*                     target.projector.*

Target names mirror the online encoder and projector one to one.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import resize_image
from .errors import ContractError
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: tuple = ((16, 1), (32, 2), (64, 2), (128, 2))
    in_channels: int = 1
    input_size: int = 112

    def __post_init__(self):
        if len(self.conv_blocks) < 1:
            raise ContractError("encoder needs at least one conv block")
        for ch, stride in self.conv_blocks:
            if ch < 1 or stride < 1:
                raise ContractError(f"bad conv block {(ch, stride)}")

    @property
    def feature_dim(self):
        return self.conv_blocks[-1][0]


@dataclass(frozen=True)
class MlpHeadConfig:
    hidden_dim: int = 256
    output_dim: int = 64

    def __post_init__(self):
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise ContractError("MLP head dims must be positive")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Anything holding parameters and (optionally) running buffers."""

    def parameters(self):
        return []

    def buffers(self):
        return {}

    def rename(self, old_prefix, new_prefix):
        for p in self.parameters():
            p.name = new_prefix + p.name[len(old_prefix):]
        self._rename_buffers(old_prefix, new_prefix)

    def _rename_buffers(self, old_prefix, new_prefix):
        pass


class Linear(Layer):
    def __init__(self, name, in_dim, out_dim, rng, bias=True, zero_init=False):
        w = np.zeros((in_dim, out_dim)) if zero_init else _uniform(rng, (in_dim, out_dim), in_dim)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias") if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        return T.add(out, self.bias) if self.bias is not None else out


class BatchNorm(Layer):
    def __init__(self, name, features, momentum=0.9, eps=1e-5):
        self.name = name
        self.gamma = Parameter(np.ones(features), f"{name}.gamma")
        self.beta = Parameter(np.zeros(features), f"{name}.beta")
        self.running_mean = np.zeros(features, dtype=self.gamma.dtype)
        self.running_var = np.ones(features, dtype=self.gamma.dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def set_buffer(self, which, values):
        target = self.running_mean if which == "running_mean" else self.running_var
        target[...] = values

    def _rename_buffers(self, old_prefix, new_prefix):
        self.name = new_prefix + self.name[len(old_prefix):]

    def __call__(self, x, training=True, update_running=True):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=training, momentum=self.momentum, eps=self.eps,
                            update_running=update_running)


class ConvBlock(Layer):
    """3x3 conv (no bias) -> batch norm -> relu."""

    def __init__(self, name, in_ch, out_ch, stride, rng):
        fan_in = in_ch * 9
        self.conv = Parameter(_uniform(rng, (out_ch, in_ch, 3, 3), fan_in), f"{name}.conv.weight")
        self.bn = BatchNorm(f"{name}.bn", out_ch)
        self.stride = stride

    def parameters(self):
        return [self.conv] + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def _rename_buffers(self, old_prefix, new_prefix):
        self.bn._rename_buffers(old_prefix, new_prefix)

    def __call__(self, x, training=True, update_running=True):
        h = T.conv2d(x, self.conv, stride=self.stride, padding=1)
        return T.relu(self.bn(h, training, update_running))


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def batch_norms(self):
        found = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                found.append(layer)
            elif isinstance(layer, (ConvBlock,)):
                found.append(layer.bn)
            elif isinstance(layer, Sequential):
                found.extend(layer.batch_norms())
        return found

    def _rename_buffers(self, old_prefix, new_prefix):
        for layer in self.layers:
            layer._rename_buffers(old_prefix, new_prefix)


class Encoder(Sequential):
    def __init__(self, prefix, cfg, rng):
        blocks, in_ch = [], cfg.in_channels
        for i, (out_ch, stride) in enumerate(cfg.conv_blocks):
            blocks.append(ConvBlock(f"{prefix}.block{i}", in_ch, out_ch, stride, rng))
            in_ch = out_ch
        super().__init__(blocks)
        self.cfg = cfg

    def __call__(self, x, training=True, update_running=True):
        h = x
        for block in self.layers:
            h = block(h, training, update_running)
        return T.global_avg_pool(h)


class MlpHead(Sequential):
    """linear -> batch norm -> relu -> linear."""

    def __init__(self, prefix, in_dim, hidden_dim, out_dim, rng):
        super().__init__([
            Linear(f"{prefix}.fc1", in_dim, hidden_dim, rng),
            BatchNorm(f"{prefix}.bn", hidden_dim),
            Linear(f"{prefix}.fc2", hidden_dim, out_dim, rng),
        ])

    def __call__(self, x, training=True, update_running=True):
        fc1, bn, fc2 = self.layers
        return fc2(T.relu(bn(fc1(x), training, update_running)))


def _as_input(v):
    if isinstance(v, Tensor):
        return v
    v = np.asarray(v)
    if v.ndim == 3:
        v = v[:, None]
    return Tensor(v)


class NetworkSet:
    """Online branch (encoder, projector, predictor), the SKD head reading the
    same online encoder object, and the EMA target branch (encoder, projector).
    """

    def __init__(self, encoder_cfg, head_cfg, num_logits, sigma, seed):
        if num_logits < 2:
            raise ContractError(f"need at least 2 SKD logits, got {num_logits}")
        if not 0.0 <= sigma <= 1.0:
            raise ContractError(f"EMA decay must lie in [0, 1], got {sigma}")
        rng = np.random.default_rng(seed)
        d, hid, out = encoder_cfg.feature_dim, head_cfg.hidden_dim, head_cfg.output_dim
        self.encoder_cfg = encoder_cfg
        self.head_cfg = head_cfg
        self.num_logits = int(num_logits)
        self.sigma = float(sigma)
        self.encoder = Encoder("online.encoder", encoder_cfg, rng)
        self.projector = MlpHead("online.projector", d, hid, out, rng)
        self.predictor = MlpHead("online.predictor", out, hid, out, rng)
        self.skd_head = MlpHead("online.skd_head", d, hid, num_logits, rng)
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_projector = copy.deepcopy(self.projector)
        for module, old in ((self.target_encoder, "online.encoder"), (self.target_projector, "online.projector")):
            module.rename(old, "target" + old[len("online"):])
            for p in module.parameters():
                p.requires_grad = False
                p.momentum_buffer = np.zeros_like(p.data)

    # parameter bookkeeping ---------------------------------------------------

    def online_parameters(self):
        return (self.encoder.parameters() + self.projector.parameters()
                + self.predictor.parameters() + self.skd_head.parameters())

    def target_parameters(self):
        return self.target_encoder.parameters() + self.target_projector.parameters()

    def online_buffers(self):
        out = {}
        for m in (self.encoder, self.projector, self.predictor, self.skd_head):
            out.update(m.buffers())
        return out

    def target_buffers(self):
        out = dict(self.target_encoder.buffers())
        out.update(self.target_projector.buffers())
        return out

    def named_parameters(self):
        return {p.name: p for p in self.online_parameters() + self.target_parameters()}

    def named_buffers(self):
        out = self.online_buffers()
        out.update(self.target_buffers())
        return out

    def cast(self, dtype):
        """Convert every parameter, momentum buffer and running statistic."""
        for p in self.online_parameters() + self.target_parameters():
            p.data = p.data.astype(dtype)
            p.momentum_buffer = p.momentum_buffer.astype(dtype)
        for m in (self.encoder, self.projector, self.predictor, self.skd_head,
                  self.target_encoder, self.target_projector):
            for bn in m.batch_norms():
                bn.running_mean = bn.running_mean.astype(dtype)
                bn.running_var = bn.running_var.astype(dtype)
        return self

    # forward passes --------------------------------------------------------

    def forward_online(self, v, training=True):
        x = _as_input(v)
        if x.shape[0] == 0:
            raise ContractError("empty batch")
        y = self.encoder(x, training)
        z = self.projector(y, training)
        q = self.predictor(z, training)
        return y, z, q

    def forward_target(self, v, training=True):
        """Target projections, always detached.

        In training mode batch statistics normalise the batch but the target's
        running statistics are left alone; they only move through EMA.
        """
        x = _as_input(v)
        y = self.target_encoder(x, training, update_running=False)
        z = self.target_projector(y, training, update_running=False)
        return T.detach(z)

    def forward_skd(self, v, training=True, features=None):
        if features is None:
            features = self.encoder(_as_input(v), training)
        return self.skd_head(features, training)

    # EMA ---------------------------------------------------------------------

    def _pairs(self):
        online = {p.name: p for p in self.encoder.parameters() + self.projector.parameters()}
        pairs = []
        for tp in self.target_parameters():
            key = "online" + tp.name[len("target"):]
            if key not in online:
                raise ContractError(f"target parameter {tp.name!r} has no online counterpart {key!r}")
            pairs.append((tp, online[key]))
        if len(pairs) != len(online):
            raise ContractError("target and online parameter sets differ in size")
        return pairs

    def _bn_pairs(self):
        online = self.encoder.batch_norms() + self.projector.batch_norms()
        target = self.target_encoder.batch_norms() + self.target_projector.batch_norms()
        if len(online) != len(target):
            raise ContractError("target and online batch-norm layers differ")
        for o, t in zip(online, target):
            if "online" + t.name[len("target"):] != o.name:
                raise ContractError(f"batch-norm name mismatch: {t.name!r} vs {o.name!r}")
        return list(zip(target, online))

    def ema_update(self):
        s = self.sigma
        for tp, op in self._pairs():
            tp.data = (s * tp.data + (1.0 - s) * op.data).astype(tp.data.dtype)
        for t_bn, o_bn in self._bn_pairs():
            t_bn.running_mean[...] = s * t_bn.running_mean + (1.0 - s) * o_bn.running_mean
            t_bn.running_var[...] = s * t_bn.running_var + (1.0 - s) * o_bn.running_var


def init_networks(encoder_cfg=None, head_cfg=None, num_logits=4, sigma=0.996, seed=0):
    net = NetworkSet(encoder_cfg or EncoderConfig(), head_cfg or MlpHeadConfig(), num_logits, sigma, seed)
    return net.cast(T.get_default_dtype())


class Classifier:
    """Encoder plus a linear head, used for fine-tuning and evaluation."""

    def __init__(self, encoder, num_classes, class_names=None, rng=None):
        self.encoder = encoder
        self.head = Linear("classifier.head", encoder.cfg.feature_dim, num_classes,
                           rng or np.random.default_rng(0), zero_init=True)
        dtype = encoder.parameters()[0].dtype
        for p in self.head.parameters():
            p.data = p.data.astype(dtype)
            p.momentum_buffer = p.momentum_buffer.astype(dtype)
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]

    def parameters(self, include_encoder=True):
        enc = self.encoder.parameters() if include_encoder else []
        return enc + self.head.parameters()

    def logits(self, x, training=False):
        return self.head(self.encoder(_as_input(x), training))

    def prepare(self, images):
        """Resize ``(N, H, W)`` images to the encoder input size."""
        images = np.asarray(images)
        size = self.encoder.cfg.input_size
        if images.shape[-2:] != (size, size):
            images = np.stack([resize_image(img, size) for img in images])
        return images.astype(self.encoder.parameters()[0].dtype)

    def predict_proba(self, images, batch_size=256):
        x = self.prepare(images)
        out = []
        for start in range(0, len(x), batch_size):
            logits = self.logits(x[start:start + batch_size], training=False)
            out.append(T.softmax_last_dim(T.detach(logits)).data)
        return np.concatenate(out, axis=0)
