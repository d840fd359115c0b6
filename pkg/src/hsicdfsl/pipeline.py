"""
End-to-end training and evaluation on a source/target cube pair.

One run trains the source model once; every trial then draws its own
K-shot target support, adapts a copy of the source model and scores the
remaining labelled target pixels. Ablation variants reuse the same source
model and the same per-trial support draws, so their differences are paired.
"""

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import embed, init_params
from .episodic import ConfusionMatrix, Episode, metrics, sample_episode
from .errors import ContractError, NumericError, SamplingError
from .hsidata import reduce_dataset, synth_domain_pair
from .mixup import (MixupSchedule, domain_distance, intermediate_phase_loss, perturb_lambda,
                    source_phase_loss, update_schedule)
from .optim import SGD
from .pseudolabel import ConvergenceWarning, select_topk, smooth_predictions, split_support

TRACE_COLUMNS = ("step", "q", "lambda2", "lambda2_perturbed", "d_source", "d_target")


@dataclass(frozen=True)
class Variant:
    name: str
    adapt: bool = True  # support fine-tuning on the target
    intermediate: bool = True  # pseudo-labelled intermediate episodes
    smooth: bool = True  # label propagation in pseudo-labelling and inference


FULL = Variant("full")
VARIANTS = {
    "full": FULL,
    "source-only": Variant("source-only", adapt=False, intermediate=False, smooth=False),
    "no-smoothing": Variant("no-smoothing", smooth=False),
    "no-intermediate": Variant("no-intermediate", intermediate=False),
}


@dataclass
class Datasets:
    source: object
    target: object


@dataclass
class TrialResult:
    trial: int
    oa: float
    aa: float
    kc: float
    per_class: np.ndarray
    confusion: np.ndarray
    trace: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    prediction_map: np.ndarray = None
    timings: dict = field(default_factory=dict)


@dataclass
class RunReport:
    variant: str
    class_names: list
    trials: list
    source_losses: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def table(self):
        return np.array([[t.oa, t.aa, t.kc] for t in self.trials])

    def summary(self):
        """(mean, std) per metric, population std over trials."""
        tab = self.table()
        return tab.mean(axis=0), tab.std(axis=0)

    def per_class_mean(self):
        return np.nanmean(np.stack([t.per_class for t in self.trials]), axis=0)


def _rng(*key):
    return np.random.default_rng([abs(int(k)) for k in key])


def prepare_datasets(cfg):
    src, tgt = synth_domain_pair(cfg.generator, _rng(cfg.run.seed, 0))
    src, _ = reduce_dataset(src, cfg.run.pca_bands)
    tgt, _ = reduce_dataset(tgt, cfg.run.pca_bands)
    return Datasets(src, tgt)


def _check_finite(loss, step, params, phase):
    val = loss.item()
    if not np.isfinite(val):
        norms = ", ".join(f"{n}={np.linalg.norm(t.data):.3g}"
                          for n, t in params.tensors.items() if t.requires_grad)
        raise NumericError(f"{phase} step {step}: loss is {val}; parameter norms: {norms}")
    return val


def _train_step(loss_fn, params, opt, step, phase):
    with T.Tape() as tape:
        loss = loss_fn()
    val = _check_finite(loss, step, params, phase)
    opt.step(tape.backward(loss, opt.params))
    return val


def run_source_phase(cfg, source, rng=None, log=None):
    """Warm-up with a trainable backbone, then CP/fusion-only episodes; returns params, losses."""
    rs = cfg.run
    rng = _rng(rs.seed, 1) if rng is None else rng
    params = init_params(cfg.encoder, rng)
    pool, _ = source.pool()
    n_way = cfg.n_way
    opt = SGD(params.trainable(), rs.source_lr, rs.momentum, rs.clip_norm)
    losses = []
    for ep in range(rs.source_episodes):
        if ep == rs.warmup_episodes:
            params.freeze_backbone()
            opt = SGD(params.trainable(), rs.lr, rs.momentum, rs.clip_norm)
        episode = sample_episode(pool, n_way, rs.k_shot, rs.q_query, rng)
        losses.append(_train_step(lambda: source_phase_loss(episode, params, cfg.mixup, rng),
                                  params, opt, ep, "source"))
        if log and (ep + 1) % 50 == 0:
            log(f"source episode {ep + 1}/{rs.source_episodes} "
                f"loss(50-avg)={np.mean(losses[-50:]):.4f}")
    params.freeze_backbone()
    return params, losses


def sample_target_support(target, k, rng):
    """K labelled pixels per target class; returns (flat indices, 0-based labels)."""
    flat = target.labels.reshape(-1)
    idx, lab = [], []
    for c in range(1, target.n_classes + 1):
        members = np.flatnonzero(flat == c)
        if len(members) <= k:
            raise SamplingError(f"target class {c} ({target.class_names[c - 1]}) has "
                                f"{len(members)} labelled pixels, needs more than {k}")
        idx.append(rng.choice(members, size=k, replace=False))
        lab += [c - 1] * k
    return np.concatenate(idx), np.array(lab)


def evaluation_index(target, support_idx):
    scored = np.setdiff1d(target.labelled_index(), support_idx)
    if np.intersect1d(scored, support_idx).size:
        raise ContractError("support pixels leaked into the scored set")
    return scored


def pseudo_label(params, query_x, support_x, support_y, n_classes, cfg, smooth):
    """Pseudo-labels for unlabelled target patches; reads no target truth."""
    zq = embed(query_x, params)
    zs = embed(support_x, params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return smooth_predictions(zq, zs, support_y, n_classes, cfg.propagation, smooth)


def run_intermediate_phase(cfg, params, datasets, support_idx, support_y, rng, variant=FULL,
                           log=None):
    """Support fine-tuning, pseudo-labelling and intermediate mixup episodes.

    Returns ``(trace rows, audit rows)``; ``params`` is updated in place.
    """
    rs = cfg.run
    target, source = datasets.target, datasets.source
    n_tgt = target.n_classes
    if not params.backbone_frozen:
        raise ContractError("adaptation expects a frozen backbone")
    opt = SGD(params.trainable(), rs.lr, rs.momentum, rs.clip_norm)
    sup_x = target.patches(support_idx)
    src_pool, _ = source.pool()
    candidates = np.setdiff1d(target.labelled_index(), support_idx)
    sched = MixupSchedule(total=rs.e_outer)
    trace, audit = [], []
    step = 0
    for n in range(rs.e_outer):
        for _ in range(rs.split_steps):
            s_i, q_i = split_support(support_y, rs.k_s, rs.k_q, rng)
            ep = Episode(sup_x[s_i], support_y[s_i], sup_x[q_i], support_y[q_i],
                         list(range(n_tgt)))
            _train_step(lambda: source_phase_loss(ep, params, cfg.mixup, rng), params, opt,
                        step, "support")
            step += 1
        if not variant.intermediate or rs.e_inner == 0:
            continue
        q_idx = rng.choice(candidates, size=min(rs.target_queries, len(candidates)),
                           replace=False)
        q_x = target.patches(q_idx)
        _, conf, f = pseudo_label(params, q_x, sup_x, support_y, n_tgt, cfg, variant.smooth)
        picked, pseudo = select_topk(f, rs.topk_per_class, conf)
        counts = np.bincount(pseudo, minlength=n_tgt)
        audit.append({"epoch": n + 1, "selected": len(picked),
                      "per_class": counts.tolist(),
                      "support_only": np.flatnonzero(counts == 0).tolist(),
                      "mean_confidence": float(conf[picked].mean()) if len(picked) else 0.0})
        if log and (counts == 0).any():
            log(f"epoch {n + 1}: classes {np.flatnonzero(counts == 0).tolist()} have no "
                "pseudo-labels and train from the support only")
        tgt_x, tgt_y = q_x[picked], pseudo
        lam2 = sched.lambda2
        lams, last = [], None
        for _ in range(rs.e_inner):
            src_ep = sample_episode(src_pool, cfg.n_way, rs.k_shot, rs.q_query, rng)
            take = rng.permutation(len(tgt_y))[:cfg.n_way * rs.q_query]
            tgt_ep = Episode(sup_x, support_y, tgt_x[take], tgt_y[take], list(range(n_tgt)))
            lam = perturb_lambda(lam2, cfg.mixup.sigma_perturb, rng)
            lams.append(lam)
            holder = {}

            def loss_fn():
                holder["step"] = intermediate_phase_loss(src_ep, tgt_ep, params, lam, rng)
                return holder["step"].loss

            _train_step(loss_fn, params, opt, step, "intermediate")
            last = holder["step"]
            step += 1
        proj = cfg.mixup.projections
        d_s = domain_distance(last.z_mixed_input, last.z_source, proj, rng)
        d_t = domain_distance(last.z_mixed_input, last.z_target, proj, rng)
        sched = update_schedule(sched, d_s, d_t, cfg.mixup.tau)
        trace.append((n + 1, sched.q, lam2, float(np.mean(lams)), d_s, d_t))
        if log:
            log(f"epoch {n + 1}/{rs.e_outer}: lambda2={lam2:.3f} -> {sched.lambda2:.3f} "
                f"(d_S={d_s:.3f}, d_T={d_t:.3f})")
    return trace, audit


def evaluate(cfg, params, target, support_idx, support_y, rng, smooth=True):
    """Score every labelled target pixel outside the support; returns TrialResult fields."""
    scored = evaluation_index(target, support_idx)
    n_cls = target.n_classes
    z = np.concatenate([embed(target.patches(scored[i:i + 512]), params)
                        for i in range(0, len(scored), 512)])
    zs = embed(target.patches(support_idx), params)
    order = rng.permutation(len(scored))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        lab, _, _ = smooth_predictions(z[order], zs, support_y, n_cls, cfg.propagation, smooth)
    pred = np.empty(len(scored), dtype=np.int64)
    pred[order] = lab
    truth = target.labels.reshape(-1)[scored] - 1
    cm = ConfusionMatrix.from_labels(truth, pred, n_cls)
    oa, aa, kc = metrics(cm)
    pmap = np.zeros(target.labels.size, dtype=np.int64)
    pmap[scored] = pred + 1
    pmap[support_idx] = support_y + 1
    return oa, aa, kc, cm, pmap.reshape(target.labels.shape)


def run_trial(cfg, source_params, datasets, trial, variant=FULL, log=None):
    rng = _rng(cfg.run.seed, 2, trial)
    t0 = time.perf_counter()
    support_idx, support_y = sample_target_support(datasets.target, cfg.run.k_shot, rng)
    params = source_params.copy()
    trace, audit = [], []
    if variant.adapt:
        trace, audit = run_intermediate_phase(cfg, params, datasets, support_idx, support_y,
                                              rng, variant, log)
    t1 = time.perf_counter()
    oa, aa, kc, cm, pmap = evaluate(cfg, params, datasets.target, support_idx, support_y,
                                    rng, variant.smooth)
    t2 = time.perf_counter()
    return TrialResult(trial, oa, aa, kc, cm.per_class_accuracy(), cm.counts, trace, audit,
                       pmap, {"adapt": t1 - t0, "evaluate": t2 - t1})


def _trial_job(args):
    cfg, arrays, datasets, trial, variant = args
    from .encoder import EncoderParams

    params = EncoderParams(cfg.encoder, {n: T.Tensor(a) for n, a in arrays.items()}, True)
    return run_trial(cfg, params, datasets, trial, variant)


def run_trials(cfg, source_params, datasets, variant=FULL, log=None):
    trials = range(cfg.run.trials)
    if cfg.run.workers > 1:
        jobs = [(cfg, source_params.arrays(), datasets, t, variant) for t in trials]
        with ProcessPoolExecutor(cfg.run.workers) as pool:
            return list(pool.map(_trial_job, jobs))
    out = []
    for t in trials:
        res = run_trial(cfg, source_params, datasets, t, variant, log)
        if log:
            log(f"[{variant.name}] trial {t + 1}/{cfg.run.trials}: OA={res.oa:.4f} "
                f"AA={res.aa:.4f} KC={res.kc:.4f}")
        out.append(res)
    return out


def run_variants(cfg, names=("full",), datasets=None, source=None, log=None):
    """Run the named variants on shared data and a shared source model."""
    timings = {}
    t0 = time.perf_counter()
    datasets = prepare_datasets(cfg) if datasets is None else datasets
    timings["data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if source is None:
        source = run_source_phase(cfg, datasets.source, log=log)
    params, losses = source
    timings["source"] = time.perf_counter() - t0
    reports = {}
    for name in names:
        t0 = time.perf_counter()
        trials = run_trials(cfg, params, datasets, VARIANTS[name], log)
        reports[name] = RunReport(name, list(datasets.target.class_names), trials, losses,
                                  {**timings, "trials": time.perf_counter() - t0})
    return reports, datasets, (params, losses)
