"""Experiment engine: pretraining, frozen-backbone transfer, leakage probes, LOSO and the w_site sweep."""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from leakbench import autodiff as ad
from leakbench import nn
from leakbench.autodiff import NonFiniteError, Tensor
from leakbench.data import ImageSet, balanced_two_view_batches, generate_site_splits
from leakbench.metrics import roc_auc
from leakbench.optim import AdamW, fit_multinomial_logreg, probe_accuracy

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """A protocol contract (isolation, frozen encoder, split sharing) was violated."""


@dataclass
class ProbeReport:
    stage: str
    representation: str
    sites: tuple
    accuracy: float
    chance: float
    n_train: int
    n_test: int
    split_hash: str
    converged: bool = True

    @property
    def kind(self):
        return "binary" if len(self.sites) == 2 else f"{len(self.sites)}-site"


@dataclass
class RunRecord:
    method: str
    seed: int
    config_hash: str
    heldout: str = None
    pretrain_sites: tuple = ()
    source_site: str = ""
    aucs: dict = field(default_factory=dict)
    probes: list = field(default_factory=list)
    selected_epoch: int = None
    pos_weight: float = None
    encoder_checksum: str = ""
    pretrain_loss: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["pretrain_sites"] = list(self.pretrain_sites)
        for p in d["probes"]:
            p["sites"] = list(p["sites"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pretrain_sites"] = tuple(d.get("pretrain_sites", ()))
        d["probes"] = [ProbeReport(**{**p, "sites": tuple(p["sites"])}) for p in d.get("probes", [])]
        return cls(**d)

    def numeric_fingerprint(self):
        """Everything except wall time, for determinism checks."""
        d = self.to_dict()
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


# ---------------------------------------------------------------------- data


_DATA_CACHE = {}


def build_data(cfg):
    """All site pools for ``cfg``, keyed by site id (cached per data-relevant config)."""
    key = json.dumps(
        [[asdict(s) for s in cfg.sites], cfg.data_seed, cfg.n_train, cfg.n_val, cfg.n_test, cfg.model.image_size],
        sort_keys=True,
    )
    if key not in _DATA_CACHE:
        sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = {
            s.site_id: generate_site_splits(s, sizes, cfg.data_seed, size=cfg.model.image_size) for s in cfg.sites
        }
    return _DATA_CACHE[key]


def _site_name(cfg, sid):
    return cfg.site(sid).label


# ---------------------------------------------------------------- pretraining


def ssl_pool(cfg, site_data):
    """Unlabelled pretraining pool of one site: its train split, capped at ``ssl.pool_per_site``."""
    train = site_data.where(split="train")
    cap = cfg.ssl.pool_per_site
    return train if not cap or cap >= len(train) else train[np.arange(cap)]


@dataclass
class PretrainResult:
    bundle: nn.ModelBundle
    loss_history: list
    site_loss_history: list
    seen_ids: set
    checkpoints: list


def _pretrain(cfg, seed, pool_sites, data, w_site=None, epochs=None, out_dir=None, config_hash="", on_epoch=None):
    pool_sites = tuple(pool_sites)
    if len(pool_sites) < 2 and not cfg.allow_single_site:
        raise ValueError("pretraining needs at least 2 sites in the pool (set allow_single_site to override)")
    adversarial = w_site is not None
    epochs = cfg.ssl.epochs if epochs is None else epochs
    bundle = nn.init_bundle(seed, cfg.model, num_sites=len(pool_sites) if adversarial else None)
    site_label = {sid: k for k, sid in enumerate(pool_sites)}
    pools = {sid: ssl_pool(cfg, data[sid]) for sid in pool_sites}
    params = {name: p for name, p in bundle.named_parameters() if not name.startswith("adversary.")}
    opt = AdamW(params, lr=cfg.ssl.lr, weight_decay=cfg.ssl.weight_decay)
    adv_opt = None
    if adversarial:
        adv_opt = AdamW(bundle.adversary, lr=cfg.ssl.lr * cfg.ssl.adv_lr_mult, weight_decay=cfg.ssl.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    history, site_history, seen, ckpts = [], [], set(), []
    for epoch in range(1, epochs + 1):
        tot, tot_site, nb = 0.0, 0.0, 0
        batches = balanced_two_view_batches(pools, cfg.ssl.batch_size, rng, cfg.augment)
        for b, (x1, x2, s, ids) in enumerate(batches, start=1):
            seen.update(ids.tolist())
            h1 = nn.encode(bundle.encoder, Tensor(x1), cfg.model.image_size)
            h2 = nn.encode(bundle.encoder, Tensor(x2), cfg.model.image_size)
            loss = nn.infonce_loss(nn.project(bundle.projector, h1), nn.project(bundle.projector, h2), cfg.ssl.tau)
            inv = loss.item()
            site_part = 0.0
            if adversarial:
                labels = np.array([site_label[v] for v in s])
                both = np.concatenate([labels, labels])
                if cfg.ssl.adv_steps > 1:
                    detached = Tensor(np.concatenate([h1.data, h2.data]))
                    for _ in range(cfg.ssl.adv_steps - 1):
                        inner = nn.site_ce_loss(bundle.adversary, detached, both, 1.0, cfg.grl_lambda, cfg.model.adv_input_norm)
                        adv_opt.zero_grad()
                        ad.backward(inner)
                        adv_opt.step()
                site = nn.site_ce_loss(
                    bundle.adversary,
                    ad.concat([h1, h2]),
                    both,
                    w_site,
                    cfg.grl_lambda,
                    cfg.model.adv_input_norm,
                )
                site_part = site.item()
                loss = ad.add(loss, site)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite pretraining loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            if adv_opt is not None:
                adv_opt.zero_grad()
            ad.backward(loss)
            opt.step()
            if adv_opt is not None:
                adv_opt.step()
            tot += inv
            tot_site += site_part
            nb += 1
        history.append(tot / nb)
        site_history.append(tot_site / nb)
        log.debug("seed %d epoch %d: L_inv %.5f L_site %.5f", seed, epoch, history[-1], site_history[-1])
        if on_epoch is not None:
            on_epoch(epoch, bundle)
        if out_dir and (cfg.checkpoints == "epoch" or (cfg.checkpoints == "final" and epoch == epochs)):
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, "final.ckpt" if epoch == epochs and cfg.checkpoints == "final" else f"epoch_{epoch:02d}.ckpt")
            nn.save_checkpoint(path, bundle, config_hash, seed)
            ckpts.append(path)
    if out_dir and cfg.checkpoints == "epoch" and epochs > 0:
        path = os.path.join(out_dir, "final.ckpt")
        nn.save_checkpoint(path, bundle, config_hash, seed)
        ckpts.append(path)
    bundle.meta.update(seed=seed, pool_sites=pool_sites)
    return PretrainResult(bundle, history, site_history, seen, ckpts)


def pretrain_ssl(cfg, seed, pool_sites=None, data=None, epochs=None, out_dir=None):
    """Contrastive pretraining of encoder and projector on the unlabeled pool."""
    data = build_data(cfg) if data is None else data
    pool_sites = cfg.pretrain_sites if pool_sites is None else pool_sites
    return _pretrain(cfg, seed, pool_sites, data, None, epochs, out_dir, cfg.config_hash())


def pretrain_canonicalf(cfg, seed, pool_sites=None, data=None, w_site=None, epochs=None, out_dir=None):
    """Contrastive pretraining plus the gradient-reversed site loss on backbone features."""
    data = build_data(cfg) if data is None else data
    pool_sites = cfg.pretrain_sites if pool_sites is None else pool_sites
    w_site = cfg.w_site if w_site is None else w_site
    if w_site < 0:
        raise ValueError("w_site must be >= 0")
    return _pretrain(cfg, seed, pool_sites, data, w_site, epochs, out_dir, cfg.config_hash())


def random_init(cfg, seed):
    bundle = nn.init_bundle(seed, cfg.model)
    return PretrainResult(bundle, [], [], set(), [])


# ----------------------------------------------------------------- downstream


@dataclass
class HeadResult:
    head: dict
    selected_epoch: int
    val_aucs: list
    train_loss: list
    pos_weight: float


def train_linear_head(bundle, cfg, seed, train_set, val_set, features=None):
    """Linear pathology head on frozen backbone features, selected by source-val AUC.

    ``features`` may carry precomputed ``(h_train, h_val)``. Ties in validation
    AUC keep the earliest epoch.
    """
    enc_before = bundle.checksum("encoder")
    proj_before = bundle.checksum("projector")
    if features is None:
        h_train = nn.embed(bundle.encoder, train_set.images)
        h_val = nn.embed(bundle.encoder, val_set.images)
    else:
        h_train, h_val = features
    y_val = val_set.y
    if len(np.unique(y_val)) < 2:
        raise ValueError("AUC undefined: source validation split has a single class")
    pos_weight = nn.compute_pos_weight(train_set.y)
    head = nn.init_head(bundle.shape)
    opt = AdamW(head, lr=cfg.downstream.lr, weight_decay=cfg.downstream.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    bs = cfg.downstream.batch_size
    best_auc, best_epoch, best_head = -np.inf, 0, None
    val_aucs, losses = [], []
    for epoch in range(1, cfg.downstream.epochs + 1):
        order = rng.permutation(len(h_train))
        tot = 0.0
        for i in range(0, len(order), bs):
            ix = order[i : i + bs]
            loss = nn.weighted_bce_loss(nn.head_logits(head, Tensor(h_train[ix])), train_set.y[ix], pos_weight)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            tot += loss.item() * len(ix)
        losses.append(tot / len(order))
        auc = roc_auc(nn.head_logits(head, Tensor(h_val)).data.ravel(), y_val)
        val_aucs.append(auc)
        if auc > best_auc:
            best_auc, best_epoch = auc, epoch
            best_head = {k: Tensor(v.data.copy()) for k, v in head.items()}
    if best_head is None:
        best_head = {k: Tensor(v.data.copy()) for k, v in head.items()}
    if bundle.checksum("encoder") != enc_before or bundle.checksum("projector") != proj_before:
        raise ProtocolError("encoder or projector changed during linear-head training")
    return HeadResult(best_head, best_epoch, val_aucs, losses, pos_weight)


def evaluate_transfer(bundle, head, eval_sets, features=None):
    """AUC of the selected head on each named split in ``eval_sets``."""
    out = {}
    for name, subset in eval_sets.items():
        h = features[name] if features and name in features else nn.embed(bundle.encoder, subset.images)
        scores = nn.head_logits(head, Tensor(h)).data.ravel()
        out[name] = roc_auc(scores, subset.y)
    return out


def finetune_full(bundle, head, cfg, seed, train_set):
    """Optional stage: unfreeze the encoder and train it jointly with the head (same recipe)."""
    ft = bundle.snapshot()
    for group in (ft.encoder,):
        for p in group.values():
            p.requires_grad = True
    ft_head = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in head.items()}
    params = {**{f"encoder.{k}": v for k, v in ft.encoder.items()}, **{f"head.{k}": v for k, v in ft_head.items()}}
    opt = AdamW(params, lr=cfg.downstream.lr, weight_decay=cfg.downstream.weight_decay)
    pos_weight = nn.compute_pos_weight(train_set.y)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    bs = cfg.downstream.batch_size
    for _ in range(cfg.downstream.epochs):
        order = rng.permutation(len(train_set))
        for i in range(0, len(order), bs):
            ix = order[i : i + bs]
            h = nn.encode(ft.encoder, Tensor(train_set.images[ix][:, None]))
            loss = nn.weighted_bce_loss(nn.head_logits(ft_head, h), train_set.y[ix], pos_weight)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    ft.head = ft_head
    return ft


# --------------------------------------------------------------------- probes


def probe_indices(cfg, data, site_id):
    """Fixed probe train/test picks for one site; depends only on the probe seed and the pool."""
    pool = data[site_id]
    n = cfg.probe.per_site
    rng = np.random.default_rng(np.random.SeedSequence([cfg.probe.seed, site_id]))
    picks = {}
    for split in ("train", "test"):
        candidates = np.flatnonzero(pool.split == split)
        if len(candidates) < n:
            raise ValueError(
                f"probe needs {n} {split} images from site {site_id}, only {len(candidates)} available"
            )
        picks[split] = np.sort(rng.choice(candidates, size=n, replace=False))
    return picks


def probe_split_hash(cfg, data, sites):
    h = hashlib.sha256()
    for sid in sorted(sites):
        picks = probe_indices(cfg, data, sid)
        for split in ("train", "test"):
            h.update(split.encode())
            h.update("\n".join(data[sid].ids[picks[split]].tolist()).encode())
    return h.hexdigest()[:16]


def standardize(train, test):
    """Z-score both arrays with the train mean and std (constant columns are left centred)."""
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def run_leakage_probes(bundle, stage, cfg, data, probe_sets):
    """Site probes on frozen ``f`` (backbone) and ``z`` (projection) features.

    ``probe_sets`` is a list of site tuples, e.g. ``[(0, 1), (0, 1, 2)]``.
    """
    enc_before = bundle.checksum()
    all_sites = sorted({s for group in probe_sets for s in group})
    feats = {}
    for sid in all_sites:
        picks = probe_indices(cfg, data, sid)
        for split in ("train", "test"):
            f, z = nn.embed(bundle.encoder, data[sid].images[picks[split]], with_projection=bundle.projector)
            feats[(sid, split)] = {"f": f, "z": z}
    reports = []
    for sites in probe_sets:
        sites = tuple(sites)
        split_hash = probe_split_hash(cfg, data, sites)
        for rep in cfg.probe.representations:
            Xtr = np.concatenate([feats[(s, "train")][rep] for s in sites])
            Xte = np.concatenate([feats[(s, "test")][rep] for s in sites])
            ytr = np.concatenate([np.full(len(feats[(s, "train")][rep]), k) for k, s in enumerate(sites)])
            yte = np.concatenate([np.full(len(feats[(s, "test")][rep]), k) for k, s in enumerate(sites)])
            if cfg.probe.standardize:
                Xtr, Xte = standardize(Xtr, Xte)
            fit = fit_multinomial_logreg(Xtr, ytr, cfg.probe.solver(), num_classes=len(sites), return_info=True)
            acc = probe_accuracy(fit.weights, Xte, yte)
            reports.append(
                ProbeReport(stage, rep, sites, acc, 1.0 / len(sites), len(ytr), len(yte), split_hash, fit.converged)
            )
    if bundle.checksum() != enc_before:
        raise ProtocolError("probing modified model parameters")
    return reports


# ---------------------------------------------------------------------- cells


def _pretrain_for(cfg, method, seed, pool, data, out_dir):
    if method == "random-init":
        return random_init(cfg, seed)
    if method == "ssl-only":
        return pretrain_ssl(cfg, seed, pool, data, out_dir=out_dir)
    if method == "canonicalf":
        return pretrain_canonicalf(cfg, seed, pool, data, out_dir=out_dir)
    raise ValueError(f"unknown method {method!r}")


def run_cell(cfg, method, seed, heldout=None, out_root=None):
    """One (method, seed[, held-out site]) unit of work, returning a :class:`RunRecord`."""
    t0 = time.perf_counter()
    data = build_data(cfg)
    chash = cfg.config_hash()
    if heldout is None:
        pool = tuple(cfg.pretrain_sites)
        source = cfg.source_site
        targets = tuple(cfg.target_sites)
    else:
        pool = tuple(s for s in cfg.site_ids if s != heldout)
        source = next(s for s in cfg.source_priority if s != heldout and s in pool)
        targets = (heldout,)
    out_dir = None
    if out_root is not None:
        out_dir = os.path.join(out_root, chash, method, str(seed))
        if heldout is not None:
            out_dir = os.path.join(out_dir, f"heldout-{_site_name(cfg, heldout)}")
    pre = _pretrain_for(cfg, method, seed, pool, data, out_dir)
    bundle = pre.bundle
    enc_sum = bundle.checksum("encoder")

    src = data[source]
    train_set, val_set = src.where(split="train"), src.where(split="val")
    head = train_linear_head(bundle, cfg, seed, train_set, val_set)
    eval_sets = {"source-val": val_set}
    for t in targets:
        eval_sets[f"target:{_site_name(cfg, t)}"] = data[t].where(split="test")
    aucs = evaluate_transfer(bundle, head.head, eval_sets)

    if heldout is not None:
        held_ids = set(data[heldout].ids.tolist())
        used = pre.seen_ids | set(train_set.ids.tolist()) | set(val_set.ids.tolist())
        if held_ids & used:
            raise ProtocolError(f"held-out site {heldout} leaked into training ({len(held_ids & used)} ids)")

    probe_sets = [tuple(pool)] if len(pool) == 2 else []
    if len(cfg.sites) >= 3:
        probe_sets.append(tuple(sorted(cfg.site_ids)))
    probes = run_leakage_probes(bundle, method, cfg, data, probe_sets)
    if cfg.downstream.full_finetune:
        ft = finetune_full(bundle, head.head, cfg, seed, train_set)
        probes += run_leakage_probes(ft, f"{method}+finetune", cfg, data, probe_sets)
    if bundle.checksum("encoder") != enc_sum:
        raise ProtocolError("encoder changed after pretraining")

    record = RunRecord(
        method=method,
        seed=seed,
        config_hash=chash,
        heldout=None if heldout is None else _site_name(cfg, heldout),
        pretrain_sites=tuple(_site_name(cfg, s) for s in pool),
        source_site=_site_name(cfg, source),
        aucs=aucs,
        probes=probes,
        selected_epoch=head.selected_epoch,
        pos_weight=head.pos_weight,
        encoder_checksum=enc_sum,
        pretrain_loss=pre.loss_history,
        checkpoints=pre.checkpoints,
    )
    record.wall_time = time.perf_counter() - t0
    log.info(
        "%s seed=%d heldout=%s aucs=%s (%.1fs)",
        method, seed, record.heldout, {k: round(v, 4) for k, v in aucs.items()}, record.wall_time,
    )
    return record


def _cell_job(args):
    cfg, method, seed, heldout, out_root = args
    return run_cell(cfg, method, seed, heldout, out_root)


def _run_cells(jobs, workers):
    if workers <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


def run_transfer(cfg, out_root=None, workers=1):
    """Fixed-role transfer: pretrain on ``pretrain_sites``, train on ``source_site``, test on targets."""
    cfg.validate()
    jobs = [(cfg, m, s, None, out_root) for m in cfg.methods for s in cfg.seeds]
    records = _run_cells(jobs, workers)
    if out_root is not None:
        write_records(records, out_root)
    return records


def run_loso(cfg, out_root=None, workers=1):
    """Leave-one-site-out over every configured site, all methods and seeds."""
    cfg.validate()
    if len(cfg.sites) < 3:
        raise ValueError("leave-one-site-out needs at least 3 sites")
    jobs = [(cfg, m, s, h, out_root) for h in cfg.site_ids for m in cfg.methods for s in cfg.seeds]
    records = _run_cells(jobs, workers)
    if out_root is not None:
        write_records(records, out_root)
    return records


def record_path(out_root, config_hash, method, seed):
    return os.path.join(out_root, config_hash, method, str(seed), "record.json")


def write_records(records, out_root):
    """``runs/<hash>/<method>/<seed>/record.json`` holding every cell of that (method, seed)."""
    grouped = {}
    for r in records:
        grouped.setdefault((r.config_hash, r.method, r.seed), []).append(r)
    paths = []
    for (chash, method, seed), recs in sorted(grouped.items()):
        path = record_path(out_root, chash, method, seed)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        recs = sorted(recs, key=lambda r: r.heldout or "")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump([r.to_dict() for r in recs], fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    return paths


def read_records(run_dir):
    """All RunRecords under ``runs/<hash>``."""
    records = []
    for root, _, files in sorted(os.walk(run_dir)):
        if "record.json" in files:
            with open(os.path.join(root, "record.json"), encoding="utf-8") as fh:
                records.extend(RunRecord.from_dict(d) for d in json.load(fh))
    return records


# ---------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    w_site: float
    target_val_auc: float
    probe_f: float
    chance: float
    criterion: float


def run_wsite_sweep(cfg, grid=None, seed=None):
    """Short CanonicalF runs over ``grid``; picks argmax of AUC - alpha * max(0, probe_f - chance).

    Uses the transfer roles of ``cfg``: pretraining pool, labelled source and
    the first target's validation split as target-side validation.
    """
    grid = tuple(cfg.sweep.grid if grid is None else grid)
    if not grid:
        raise ValueError("w_site sweep grid is empty")
    seed = cfg.sweep.seed if seed is None else seed
    data = build_data(cfg)
    pool = tuple(cfg.pretrain_sites)
    src = data[cfg.source_site]
    target = cfg.target_sites[0]
    target_val = data[target].where(split="val")
    rows = []
    for w in grid:
        pre = pretrain_canonicalf(cfg, seed, pool, data, w_site=w, epochs=cfg.sweep.epochs)
        head = train_linear_head(pre.bundle, cfg, seed, src.where(split="train"), src.where(split="val"))
        auc = evaluate_transfer(pre.bundle, head.head, {"t": target_val})["t"]
        probe = next(
            p for p in run_leakage_probes(pre.bundle, f"w={w}", cfg, data, [pool]) if p.representation == "f"
        )
        crit = auc - cfg.sweep.alpha * max(0.0, probe.accuracy - probe.chance)
        rows.append(SweepRow(float(w), auc, probe.accuracy, probe.chance, crit))
    best = max(range(len(rows)), key=lambda i: (rows[i].criterion, -i))
    return rows[best].w_site, rows
