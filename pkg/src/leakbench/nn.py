"""Encoder, projection head, site adversary, linear head and the protocol losses."""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from leakbench import autodiff as ad
from leakbench.autodiff import Tensor

CKPT_MAGIC = b"LEAKBENCH-CKPT-v1\n"


@dataclass(frozen=True)
class ModelShape:
    image_size: int = 32
    channels: tuple = (8, 16)
    feature_dim: int = 64
    proj_hidden: int = 64
    proj_dim: int = 32
    adv_hidden: int = 32
    # the adversary z-scores h over the batch before its first layer
    adv_input_norm: bool = True


@dataclass
class ModelBundle:
    """Parameters of one model. Each group is an ordered ``name -> Tensor`` dict."""

    shape: ModelShape
    encoder: dict
    projector: dict
    adversary: dict = None
    head: dict = None
    meta: dict = field(default_factory=dict)

    def groups(self):
        out = {"encoder": self.encoder, "projector": self.projector}
        if self.adversary is not None:
            out["adversary"] = self.adversary
        if self.head is not None:
            out["head"] = self.head
        return out

    def named_parameters(self):
        for gname, group in self.groups().items():
            for pname, p in group.items():
                yield f"{gname}.{pname}", p

    def num_parameters(self, group=None):
        groups = self.groups() if group is None else {group: self.groups()[group]}
        return int(np.sum([p.size for g in groups.values() for p in g.values()]))

    def snapshot(self):
        """Deep copy detached from any graph."""
        copy = lambda g: None if g is None else {k: Tensor(v.data.copy()) for k, v in g.items()}  # noqa: E731
        return ModelBundle(
            self.shape,
            copy(self.encoder),
            copy(self.projector),
            copy(self.adversary),
            copy(self.head),
            dict(self.meta),
        )

    def checksum(self, group=None):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            if group is None or name.startswith(group + "."):
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _affine(rng, d_in, d_out):
    return (
        Tensor(_kaiming_uniform(rng, (d_in, d_out), d_in), requires_grad=True),
        Tensor(np.zeros(d_out), requires_grad=True),
    )


def _conv(rng, c_in, c_out, k=3):
    return (
        Tensor(_kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True),
        Tensor(np.zeros(c_out), requires_grad=True),
    )


def init_encoder(rng, shape):
    c1, c2 = shape.channels
    p = {}
    p["conv1.w"], p["conv1.b"] = _conv(rng, 1, c1)
    p["conv2.w"], p["conv2.b"] = _conv(rng, c1, c1)
    p["conv3.w"], p["conv3.b"] = _conv(rng, c1, c2)
    p["conv4.w"], p["conv4.b"] = _conv(rng, c2, c2)
    p["fc.w"], p["fc.b"] = _affine(rng, c2, shape.feature_dim)
    return p


def init_projector(rng, shape):
    p = {}
    p["fc1.w"], p["fc1.b"] = _affine(rng, shape.feature_dim, shape.proj_hidden)
    p["fc2.w"], p["fc2.b"] = _affine(rng, shape.proj_hidden, shape.proj_dim)
    return p


def init_adversary(rng, shape, num_sites):
    p = {}
    p["fc1.w"], p["fc1.b"] = _affine(rng, shape.feature_dim, shape.adv_hidden)
    p["fc2.w"], p["fc2.b"] = _affine(rng, shape.adv_hidden, num_sites)
    return p


def init_head(shape):
    return {
        "w": Tensor(np.zeros((shape.feature_dim, 1)), requires_grad=True),
        "b": Tensor(np.zeros(1), requires_grad=True),
    }


def init_bundle(seed, shape=None, num_sites=None):
    """Fresh randomly initialised bundle.

    Encoder, projector and adversary draw from independent child streams of
    ``seed`` so that adding an adversary never perturbs the other weights.
    """
    shape = shape or ModelShape()
    enc_ss, proj_ss, adv_ss = np.random.SeedSequence(seed).spawn(3)
    bundle = ModelBundle(
        shape,
        init_encoder(np.random.default_rng(enc_ss), shape),
        init_projector(np.random.default_rng(proj_ss), shape),
    )
    if num_sites is not None:
        bundle.adversary = init_adversary(np.random.default_rng(adv_ss), shape, num_sites)
    bundle.meta["seed"] = seed
    return bundle


def affine(x, w, b):
    return ad.bias_add(ad.matmul(x, w), b)


def encode(params, x, image_size=None):
    """Backbone features h [B, D_f] for a single-channel batch [B, 1, H, W]."""
    x = ad.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ad.ShapeError(f"encode: expected [B, 1, H, W] input, got shape {x.shape}")
    if image_size is not None and x.shape[2:] != (image_size, image_size):
        raise ad.ShapeError(f"encode: expected {image_size}x{image_size} images, got {x.shape[2:]}")
    a = ad.relu(ad.conv2d(x, params["conv1.w"], params["conv1.b"], stride=1, padding=1))
    a = ad.relu(ad.conv2d(a, params["conv2.w"], params["conv2.b"], stride=2, padding=1))
    a = ad.relu(ad.conv2d(a, params["conv3.w"], params["conv3.b"], stride=1, padding=1))
    a = ad.relu(ad.conv2d(a, params["conv4.w"], params["conv4.b"], stride=2, padding=1))
    return affine(ad.global_mean_pool(a), params["fc.w"], params["fc.b"])


def project(params, h):
    """Unit-norm projection features z [B, D_z]."""
    a = ad.relu(affine(h, params["fc1.w"], params["fc1.b"]))
    return ad.l2_normalize(affine(a, params["fc2.w"], params["fc2.b"]), eps=1e-12)


def adversary_logits(params, h, input_norm=True):
    if input_norm:
        h = ad.standardize_columns(h)
    a = ad.relu(affine(h, params["fc1.w"], params["fc1.b"]))
    return affine(a, params["fc2.w"], params["fc2.b"])


def head_logits(params, h):
    return affine(h, params["w"], params["b"])


def infonce_loss(z1, z2, tau=0.2):
    """NT-Xent over the 2B stacked views with cosine similarity.

    Each anchor's positive is its paired view; the other 2B-2 views are
    negatives. Rows must already be unit-normalised.
    """
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"infonce_loss: tau must be > 0, got {tau}")
    if z1.shape != z2.shape or z1.data.ndim != 2:
        raise ad.ShapeError(f"infonce_loss: view shapes differ {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b == 0:
        raise ValueError("infonce_loss: empty batch")
    z = ad.concat([z1, z2], axis=0)
    sim = ad.scalar_mul(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    # self-similarity excluded by a constant far below any cos/tau; exp underflows to exactly 0
    mask = Tensor(np.diag(np.full(2 * b, -1e9)))
    targets = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return ad.softmax_cross_entropy(ad.add(sim, mask), targets)


def site_ce_loss(adv_params, h, sites, w_site=0.2, lam=1.0, input_norm=True):
    """``w_site`` times the site cross-entropy on a gradient-reversed copy of ``h``.

    With ``input_norm`` the adversary sees ``h`` z-scored over the batch, so
    the encoder cannot hide site information by rescaling features.
    """
    sites = np.asarray(sites)
    k = adv_params["fc2.b"].shape[0]
    if sites.size and (sites.min() < 0 or sites.max() >= k):
        raise ValueError(f"site_ce_loss: site labels must lie in [0, {k})")
    logits = adversary_logits(adv_params, ad.grad_reverse(h, lam), input_norm)
    return ad.scalar_mul(ad.softmax_cross_entropy(logits, sites), w_site)


def weighted_bce_loss(logits, y, pos_weight):
    pos_weight = float(pos_weight)
    if not pos_weight > 0:
        raise ValueError(f"weighted_bce_loss: pos_weight must be > 0, got {pos_weight}")
    return ad.bce_with_logits(logits, y, pos_weight)


def compute_pos_weight(y):
    """#negatives / #positives of a binary label vector."""
    y = np.asarray(y)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0:
        raise ValueError("pos_weight undefined: no positive labels")
    return neg / pos


def embed(params, images, batch_size=256, with_projection=None):
    """Frozen features for a stack of images [N, H, W] (or [N, 1, H, W]).

    Returns ``h`` and, when ``with_projection`` params are given, also ``z``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    hs, zs = [], []
    for i in range(0, len(images), batch_size):
        h = encode(params, Tensor(images[i : i + batch_size]))
        hs.append(h.data)
        if with_projection is not None:
            zs.append(project(with_projection, h).data)
    dim = params["fc.b"].shape[0]
    h = np.concatenate(hs) if hs else np.zeros((0, dim))
    if with_projection is None:
        return h
    return h, (np.concatenate(zs) if zs else np.zeros((0, with_projection["fc2.b"].shape[0])))


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, bundle, config_hash="", seed=None):
    header = {
        "config_hash": config_hash,
        "seed": bundle.meta.get("seed") if seed is None else seed,
        "shape": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(bundle.shape).items()},
        "params": [[name, list(p.shape)] for name, p in bundle.named_parameters()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, p in bundle.named_parameters():
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a LEAKBENCH-CKPT-v1 checkpoint")
    off = len(CKPT_MAGIC)
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    header = json.loads(raw[off : off + n])
    off += n
    shape_kw = header["shape"]
    shape_kw["channels"] = tuple(shape_kw["channels"])
    groups = {}
    for name, dims in header["params"]:
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += 8 * count
        gname, pname = name.split(".", 1)
        groups.setdefault(gname, {})[pname] = Tensor(data, requires_grad=True)
    bundle = ModelBundle(
        ModelShape(**shape_kw),
        groups["encoder"],
        groups["projector"],
        groups.get("adversary"),
        groups.get("head"),
        {"seed": header["seed"], "config_hash": header["config_hash"]},
    )
    return bundle
