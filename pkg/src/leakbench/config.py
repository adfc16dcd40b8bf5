"""Experiment configuration: dataclasses, INI-style config files and the config hash."""

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field

from leakbench.data import AugmentConfig, SiteSpec
from leakbench.nn import ModelShape
from leakbench.optim import ProbeSolverConfig

METHODS = ("random-init", "ssl-only", "canonicalf")


def default_sites():
    # site 0 plays the NIH role (labelled source), site 1 CheXpert, site 2 RSNA.
    # The default sites differ only in sensor noise; offsets, gamma, crop and
    # the corner tag stay available per site but are off (see docs/config.md).
    return [
        SiteSpec(0, "nih", noise_sigma=0.0, prevalence=0.1),
        SiteSpec(1, "chexpert", noise_sigma=0.035, prevalence=0.1),
        SiteSpec(2, "rsna", noise_sigma=0.055, prevalence=0.1),
    ]


@dataclass
class SSLConfig:
    tau: float = 0.2
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    # images per site used for pretraining (0 = the whole train split)
    pool_per_site: int = 384
    # CanonicalF adversary: learning-rate multiplier and updates per batch
    # (all but the last on detached features, so only the last reaches the encoder)
    adv_lr_mult: float = 10.0
    adv_steps: int = 5


@dataclass
class DownstreamConfig:
    epochs: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    pos_weight: str = "auto"
    full_finetune: bool = False


@dataclass
class ProbeConfig:
    per_site: int = 1000
    seed: int = 12345
    representations: tuple = ("f", "z")
    l2_strength: float = 1e-4
    max_iters: int = 2000
    grad_tol: float = 1e-7
    # z-score each feature with train-split statistics before fitting
    standardize: bool = True

    def solver(self):
        return ProbeSolverConfig(self.l2_strength, self.max_iters, self.grad_tol)


@dataclass
class SweepConfig:
    grid: tuple = (0.0, 0.1, 0.2, 0.5)
    epochs: int = 5
    alpha: float = 1.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    sites: list = field(default_factory=default_sites)
    mode: str = "loso"
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2)
    data_seed: int = 2024
    n_train: int = 3000
    n_val: int = 1000
    n_test: int = 1000
    # transfer mode roles
    pretrain_sites: tuple = (0, 1)
    source_site: int = 0
    target_sites: tuple = (1, 2)
    # LOSO: the labelled source is the first of these that is not held out
    source_priority: tuple = (0, 1, 2)
    allow_single_site: bool = False
    model: ModelShape = field(default_factory=ModelShape)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    w_site: float = 0.2
    grl_lambda: float = 1.0
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    checkpoints: str = "final"

    def site(self, site_id):
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(f"no site with id {site_id}")

    @property
    def site_ids(self):
        return [s.site_id for s in self.sites]

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def validate(self):
        ids = self.site_ids
        if len(set(ids)) != len(ids):
            raise ValueError("site ids must be unique")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.mode not in ("loso", "transfer"):
            raise ValueError(f"mode must be 'loso' or 'transfer', got {self.mode!r}")
        if self.mode == "transfer":
            if self.source_site in self.target_sites:
                raise ValueError("labelled source site cannot also be a held-out target")
            for s in (*self.pretrain_sites, self.source_site, *self.target_sites):
                self.site(s)
        if self.mode == "loso" and len(ids) < 3:
            raise ValueError("leave-one-site-out needs at least 3 sites")
        if self.w_site < 0:
            raise ValueError("w_site must be >= 0")
        if not self.grl_lambda > 0:
            raise ValueError("grl_lambda must be > 0")
        if self.ssl.tau <= 0:
            raise ValueError("ssl.tau must be > 0")
        if not self.ssl.adv_lr_mult > 0:
            raise ValueError("ssl.adv_lr_mult must be > 0")
        if self.ssl.adv_steps < 1:
            raise ValueError("ssl.adv_steps must be >= 1")
        if self.ssl.pool_per_site < 0:
            raise ValueError("ssl.pool_per_site must be >= 0 (0 uses the whole train split)")
        if self.downstream.pos_weight != "auto":
            raise ValueError("downstream.pos_weight is computed from the source train split; only 'auto' is accepted")
        if self.checkpoints not in ("none", "final", "epoch"):
            raise ValueError("checkpoints must be none, final or epoch")
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ------------------------------------------------------------------ parsing

_SECTION_TYPES = {
    "ssl": SSLConfig,
    "downstream": DownstreamConfig,
    "probe": ProbeConfig,
    "sweep": SweepConfig,
    "model": ModelShape,
    "augment": AugmentConfig,
}


def _coerce(raw, default, key):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        sample = default[0] if default else ""
        if isinstance(sample, (int, float)) and not isinstance(sample, bool):
            return tuple(type(sample)(float(x)) if isinstance(sample, float) else int(x) for x in items)
        return tuple(items)
    return raw


def _update(obj, items, section):
    names = {f.name: f for f in dataclasses.fields(obj)}
    kw = {}
    for key, raw in items:
        if key not in names:
            raise ValueError(f"[{section}] unknown key {key!r}")
        kw[key] = _coerce(raw, getattr(obj, key), f"[{section}] {key}")
    return dataclasses.replace(obj, **kw)


def load_config(path=None, text=None):
    """Read an INI-style config; every key is optional and overrides a default.

    Sections: ``[experiment]``, ``[ssl]``, ``[downstream]``, ``[probe]``,
    ``[sweep]``, ``[model]``, ``[augment]`` and one ``[site.<id>]`` per site.
    Site sections replace the default site list as a whole; keys missing from
    a site section take the default site's value (or the SiteSpec default).
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    elif text is not None:
        parser.read_string(text)
    cfg = ExperimentConfig()
    site_sections = []
    for section in parser.sections():
        items = parser.items(section)
        if section == "experiment":
            cfg = _update(cfg, items, section)
        elif section in _SECTION_TYPES:
            setattr(cfg, section, _update(getattr(cfg, section), items, section))
        elif section.startswith("site."):
            site_sections.append(section)
        else:
            raise ValueError(f"unknown config section [{section}]")
    if site_sections:
        defaults = {s.site_id: s for s in default_sites()}
        sites = []
        for section in site_sections:
            sid = int(section.split(".", 1)[1])
            base = defaults.get(sid, SiteSpec(sid))
            base = dataclasses.replace(base, site_id=sid)
            sites.append(_update(base, parser.items(section), section))
        cfg.sites = sorted(sites, key=lambda s: s.site_id)
    return cfg.validate()


def dump_config(cfg):
    """Render ``cfg`` in the same INI format :func:`load_config` reads."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    top = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "sites" or f.name in _SECTION_TYPES:
            continue
        top[f.name] = fmt(v)
    parser["experiment"] = top
    for name in _SECTION_TYPES:
        sub = getattr(cfg, name)
        parser[name] = {f.name: fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    for s in cfg.sites:
        parser[f"site.{s.site_id}"] = {
            f.name: fmt(getattr(s, f.name)) for f in dataclasses.fields(s) if f.name != "site_id"
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
