"""Experiment runner: ``sidl pretrain | customize | sample | evaluate | analyze``.

Output layout under the output root (``--out``, else ``$SIDL_OUT``, else ``runs``)::

    pretrain/   denoiser.sidl extractor.sidl probe.sidl dictionary.sidl manifest.json timing.json
    customize/  head.sidl input.pgm mask_face.pgm mask_hair.pgm embeddings.csv trace.csv manifest.json timing.json
    sample/     sample_NNN.pgm index.csv manifest.json
    evaluate/   eval.csv | ablation.csv | alpha_sweep.csv, manifest.json, timing.json
    analyze/    stats.csv projection.csv scatter.pgm manifest.json timing.json

Everything except ``timing.json`` is a pure function of (config, seed) and is
byte-identical across reruns.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .analytics import (embedding_stats, project_2d, scatter_raster, write_projection_csv,
                        write_stats_csv)
from .customizer import (GenericEncoder, IdentityExtractor, IdentityHead, TrainConfig,
                         extractor_margins, train_customizer, train_extractor)
from .denoiser import Denoiser, ddim_sample, pretrain_denoiser
from .metrics import (EVAL_COLUMNS, ContextProbe, EvalReport, cosine, frechet_distance,
                      identity_similarity, pairwise_diversity, perceptual_features,
                      probe_accuracy, train_probe, trusted_diversity, write_eval_csv)
from .numcore import MLP, Tensor, no_grad
from .priorspace import slot_priors
from .schedule import make_schedule
from .toyworld import (NULL_TOKEN, ToyWorld, WorldConfig, _write_p5, build_token_dict,
                       compose_prompt, mask_to_pgm, read_pgm, to_pgm)

log = logging.getLogger("sidl")

PROBE_GATE = 0.9
RECOMMENDED_ALPHAS = (0.4, 0.6)
ALPHA_SWEEP = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

# ablation rows: (label, overrides)
ABLATION_ROWS = (
    ("generic_encoder", {"encoder_mode": "generic_features"}),
    ("no_adain", {"use_adain": False}),
    ("no_mask", {"use_mask": False}),
    ("noise_only", {"loss_mode": "noise_only"}),
    ("rec_only", {"loss_mode": "rec_only"}),
    ("full", {}),
)


class PipelineError(RuntimeError):
    """A quality gate or checksum chain check failed."""


@dataclass
class ExperimentConfig:
    # customization (same names and defaults as TrainConfig)
    alpha: float = 0.6
    beta_hair: float = 0.1
    steps: int = 450
    learning_rate: float = 5e-5
    batch: int = 1
    guidance_scale: float = 8.5
    seed: int = 0
    optimizer: str = "adam"
    use_adain: bool = True
    use_mask: bool = True
    mask_normalized: bool = False
    loss_mode: str = "two_phase"
    prompt_mode: str = "context"
    augment: bool = True
    encoder_mode: str = "identity_extractor"
    prior_mode: str = "shared"
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    # toy world
    n_identities: int = 64
    n_heldout: int = 16
    n_contexts: int = 8
    image_size: int = 16
    emb_dim: int = 16
    world_seed: int = 0
    # pretraining budgets
    pretrain_steps: int = 20000
    pretrain_batch: int = 32
    extractor_steps: int = 3000
    probe_steps: int = 2000
    # customize / sample / evaluate
    identity: int = 64
    context: int = 0
    count: int = 8
    samples_per_context: int = 2
    eval_identities: int = 5
    eval_seeds: int = 5

    def __post_init__(self):
        if self.encoder_mode not in ("identity_extractor", "generic_features"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")
        if self.prior_mode not in ("shared", "separate"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if self.count < 0 or self.samples_per_context < 1:
            raise ValueError("count must be >= 0 and samples_per_context >= 1")
        self.train_config()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def world_config(self) -> WorldConfig:
        return WorldConfig(n_identities=self.n_identities, n_heldout=self.n_heldout,
                           n_contexts=self.n_contexts, size=self.image_size,
                           emb_dim=self.emb_dim, seed=self.world_seed)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse_value(kind, raw):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def parse_config(text, base=None) -> ExperimentConfig:
    """Flat ``key = value`` lines, ``#`` comments; unknown keys are errors."""
    kinds = {f.name: _TYPES[f.type] for f in fields(ExperimentConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {n}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(kinds[key], raw)
        except ValueError as e:
            raise ValueError(f"line {n}: bad value for {key}: {e}") from None
    return (base or ExperimentConfig()).replace(**values)


def load_config(path=None, seed=None) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text()) if path else ExperimentConfig()
    return cfg.replace(seed=seed) if seed is not None else cfg


# -- artifact helpers ----------------------------------------------------------

def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _fmt(v):
    return f"{v:.10g}"


class _Timer:
    def __init__(self):
        self.marks = {}

    def __call__(self, label):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.marks[label] = time.perf_counter() - self.t0
        return _Ctx()


def _dirs(out, name):
    d = Path(out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- fixture -----------------------------------------------------------------------

@dataclass
class Fixture:
    cfg: ExperimentConfig
    world: ToyWorld
    tdict: object
    schedule: object
    model: Denoiser
    extractor: IdentityExtractor
    probe: ContextProbe
    manifest_hash: str
    _pseudo: dict = field(default_factory=dict)

    def checksums(self):
        return {"denoiser": self.model.checksum(),
                "dictionary": checkpoint.params_checksum([self.tdict.embeddings.data]),
                "extractor": checkpoint.params_checksum([p.data for p in self.extractor.parameters()]),
                "probe": checkpoint.params_checksum([p.data for p in self.probe.parameters()])}

    def prior(self, mode):
        return slot_priors(self.tdict.identity_rows(), mode)

    def uncond(self):
        return self.model.condition(compose_prompt([self.tdict.id(NULL_TOKEN)], self.tdict)).data

    def pseudo_features(self, seed):
        """Extractor features of samples drawn with real identity tokens (FID reference set)."""
        if seed not in self._pseudo:
            td, c = self.tdict, self.world.config
            conds = [self.model.condition(compose_prompt(
                list(td.identity_tokens(i)) + [td.context_token(i % c.n_contexts)], td)).data
                for i in range(c.n_identities)]
            noise = np.random.default_rng([seed, 0x6E7]).standard_normal(
                (len(conds), 1, c.size, c.size))
            imgs = np.clip(ddim_sample(self.model, np.array(conds), self.uncond(), self.schedule,
                                       noise, self.cfg.guidance_scale, self.cfg.ddim_steps), -1, 1)
            self._pseudo[seed] = _features(self.extractor, imgs)
        return self._pseudo[seed]


def _features(encoder, imgs):
    with no_grad():
        return encoder.features(Tensor(np.asarray(imgs).reshape(len(imgs), -1))).data


def cmd_pretrain(cfg: ExperimentConfig, out) -> dict:
    """Build the frozen fixture and write its checkpoints and manifest."""
    d = _dirs(out, "pretrain")
    tm = _Timer()
    world = ToyWorld(cfg.world_config())
    tdict = build_token_dict(world)
    s = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    with tm("denoiser"):
        model, stats = pretrain_denoiser(world, tdict, s, cfg.pretrain_steps,
                                         np.random.default_rng([cfg.seed, 1]),
                                         batch=cfg.pretrain_batch)
    with tm("extractor"):
        extractor = train_extractor(world, np.random.default_rng([cfg.seed, 2]),
                                    steps=cfg.extractor_steps)
    with tm("probe"):
        probe = train_probe(world, np.random.default_rng([cfg.seed, 3]), steps=cfg.probe_steps)
    acc = probe_accuracy(probe, world, np.random.default_rng([cfg.seed, 4]))
    margins = extractor_margins(extractor, world, range(cfg.n_identities),
                                np.random.default_rng([cfg.seed, 5]))
    baselines = {"probe_accuracy": acc, "extractor_margins": margins, "denoiser_loss": stats}
    problems = []
    if not acc > PROBE_GATE:
        problems.append(f"probe accuracy {acc:.3f} <= {PROBE_GATE}")
    if not stats["loss_end"] < stats["loss_start"]:
        problems.append(f"denoiser loss did not decrease ({stats['loss_start']:.4g} -> "
                        f"{stats['loss_end']:.4g})")
    if problems:
        raise PipelineError("fixture quality gate failed: " + "; ".join(problems)
                            + f"\nbaselines: {json.dumps(baselines, sort_keys=True)}")
    files = {
        "denoiser.sidl": model.state(),
        "extractor.sidl": extractor.state(),
        "probe.sidl": probe.net.state("probe"),
        "dictionary.sidl": {"dictionary.embeddings": tdict.embeddings.data},
    }
    sums = {}
    for name, arrays in files.items():
        checkpoint.save(d / name, arrays)
        sums[name] = checkpoint.file_checksum(d / name)
    manifest = {"command": "pretrain", "config": cfg.to_dict(), "checkpoints": sums,
                "baselines": baselines}
    _write_json(d / "manifest.json", manifest)
    _write_json(d / "timing.json", tm.marks)
    log.info("pretrain: probe accuracy %.3f, denoiser loss %.4g -> %.4g",
             acc, stats["loss_start"], stats["loss_end"])
    return manifest


def load_fixture(out, cfg: ExperimentConfig | None = None) -> Fixture:
    d = Path(out) / "pretrain"
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no pretrain manifest at {mpath}; run `sidl pretrain` first")
    manifest = _read_json(mpath)
    for name, want in manifest["checkpoints"].items():
        got = checkpoint.file_checksum(d / name)
        if got != want:
            raise PipelineError(f"{name}: checksum {got} does not match manifest {want}")
    pcfg = ExperimentConfig(**manifest["config"])
    # world, schedule and budgets come from the pretrain run; per-run knobs from cfg
    fixed = {k: getattr(pcfg, k) for k in ("T", "beta_start", "beta_end", "n_identities",
                                           "n_heldout", "n_contexts", "image_size", "emb_dim",
                                           "world_seed")}
    cfg = (cfg or pcfg).replace(**fixed)
    world = ToyWorld(cfg.world_config())
    tdict = build_token_dict(world)
    stored = checkpoint.load(d / "dictionary.sidl")["dictionary.embeddings"]
    if not np.array_equal(stored, tdict.embeddings.data):
        raise PipelineError("rebuilt token dictionary differs from the stored one")
    model = Denoiser.from_state(checkpoint.load(d / "denoiser.sidl"))
    ext = MLP.from_state(checkpoint.load(d / "extractor.sidl"), "extractor")
    ext.freeze()
    probe = MLP.from_state(checkpoint.load(d / "probe.sidl"), "probe")
    probe.freeze()
    return Fixture(cfg, world, tdict, make_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
                   model, IdentityExtractor(ext), ContextProbe(probe),
                   checkpoint.file_checksum(mpath))


def _encoder(fx: Fixture, cfg: ExperimentConfig):
    if cfg.encoder_mode == "generic_features":
        return GenericEncoder(fx.world.config.size ** 2, seed=cfg.seed)
    return fx.extractor


def input_sample(fx: Fixture, identity, seed):
    """The single customization image for ``identity``: context 0, seeded nuisance."""
    smp = fx.world.gen_sample(identity, 0, np.random.default_rng([seed, identity, 0x1A6E]))
    return smp.z0.data, smp.mask_face, smp.mask_hair


def customize_once(fx: Fixture, cfg: ExperimentConfig, image, mask_face, mask_hair):
    """One customization run; returns (TrainResult, elapsed seconds)."""
    head = IdentityHead.create(_encoder(fx, cfg), fx.world.config.emb_dim,
                               np.random.default_rng([cfg.seed, 0x4EAD]))
    before = fx.checksums()
    t0 = time.perf_counter()
    res = train_customizer(image, (mask_face, mask_hair), fx.model, fx.prior(cfg.prior_mode),
                           fx.tdict, fx.schedule, cfg.train_config(), head,
                           n_contexts=fx.world.config.n_contexts)
    elapsed = time.perf_counter() - t0
    if fx.checksums() != before:
        raise PipelineError("frozen fixture parameters changed during customization")
    return res, elapsed


def cmd_customize(cfg: ExperimentConfig, out, image_path=None, face_mask_path=None,
                  hair_mask_path=None) -> dict:
    fx = load_fixture(out, cfg)
    cfg = fx.cfg
    d = _dirs(out, "customize")
    if image_path:
        if not (face_mask_path and hair_mask_path):
            raise ValueError("an input image needs --face-mask and --hair-mask")
        image = read_pgm(image_path)[None]
        mf = (read_pgm(face_mask_path) > 0).astype(np.float64)
        mh = (read_pgm(hair_mask_path) > 0).astype(np.float64)
        source = {"image": str(image_path)}
    else:
        image, mf, mh = input_sample(fx, cfg.identity, cfg.seed)
        source = {"identity": cfg.identity}
    res, elapsed = customize_once(fx, cfg, image, mf, mh)
    to_pgm(image, d / "input.pgm")
    mask_to_pgm(mf, d / "mask_face.pgm")
    mask_to_pgm(mh, d / "mask_hair.pgm")
    head_arrays = res.head.state()
    head_arrays["embeddings"] = res.embeddings
    checkpoint.save(d / "head.sidl", head_arrays)
    head_sum = checkpoint.file_checksum(d / "head.sidl")
    write_embeddings_csv(res.embeddings, d / "embeddings.csv")
    write_trace_csv(res.trace, d / "trace.csv")
    manifest = {"command": "customize", "config": cfg.to_dict(), "source": source,
                "pretrain_manifest": fx.manifest_hash, "head": head_sum,
                "frozen_checksums": fx.checksums(), "trace_rows": len(res.trace)}
    _write_json(d / "manifest.json", manifest)
    _write_json(d / "timing.json", {"customize": elapsed})
    return manifest


def write_embeddings_csv(embs, path):
    embs = np.asarray(embs)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slot"] + [f"d{j}" for j in range(embs.shape[1])])
        for i, row in enumerate(embs):
            w.writerow([i + 1] + [repr(float(x)) for x in row])


def read_embeddings_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows])


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t", "branch", "loss"])
        for step, t, branch, loss in trace:
            w.writerow([step, t, branch, repr(float(loss))])


def _customized(out, fx: Fixture):
    """Embeddings and input of the customize run, after checking the manifest chain."""
    d = Path(out) / "customize"
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no customize run in {d}; run `sidl customize` first")
    man = _read_json(d / "manifest.json")
    if man["pretrain_manifest"] != fx.manifest_hash:
        raise PipelineError(f"customize run was made against pretrain manifest "
                            f"{man['pretrain_manifest']}, current is {fx.manifest_hash}")
    if checkpoint.file_checksum(d / "head.sidl") != man["head"]:
        raise PipelineError("head.sidl does not match its manifest")
    emb = checkpoint.load(d / "head.sidl")["embeddings"]
    image = read_pgm(d / "input.pgm")[None]
    mf = (read_pgm(d / "mask_face.pgm") > 0).astype(np.float64)
    return emb, image, mf, man


def generate(fx: Fixture, emb, contexts, noise_seeds, guidance):
    """One DDIM sample per (context, noise seed) pair; context None means no context token."""
    td = fx.tdict
    conds = []
    for c in contexts:
        if c is not None and not 0 <= c < fx.world.config.n_contexts:
            raise ValueError(f"unknown context {c}")
        toks = list(td.placeholder_ids) + ([] if c is None else [td.context_token(c)])
        conds.append(fx.model.condition(compose_prompt(toks, td, (emb[0], emb[1]))).data)
    size = fx.world.config.size
    if not conds:
        return np.zeros((0, 1, size, size))
    noise = np.stack([np.random.default_rng(ns).standard_normal((1, size, size))
                      for ns in noise_seeds])
    out = ddim_sample(fx.model, np.array(conds), fx.uncond(), fx.schedule, noise, guidance,
                      fx.cfg.ddim_steps)
    return np.clip(out, -1.0, 1.0)


def cmd_sample(cfg: ExperimentConfig, out, context=None, count=None, guidance=None) -> dict:
    fx = load_fixture(out, cfg)
    cfg = fx.cfg
    emb, _, _, cman = _customized(out, fx)
    count = cfg.count if count is None else count
    context = cfg.context if context is None else context
    guidance = cfg.guidance_scale if guidance is None else guidance
    d = _dirs(out, "sample")
    for old in d.glob("sample_*.pgm"):
        old.unlink()
    seeds = [cfg.seed ^ i for i in range(count)]
    imgs = generate(fx, emb, [context] * count, [[s, 0x5A] for s in seeds], guidance)
    with open(d / "index.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "file", "context", "seed", "guidance"])
        for i, img in enumerate(imgs):
            name = f"sample_{i:03d}.pgm"
            to_pgm(img, d / name)
            w.writerow([i, name, "" if context is None else context, seeds[i], _fmt(guidance)])
    manifest = {"command": "sample", "config": cfg.to_dict(),
                "pretrain_manifest": fx.manifest_hash,
                "customize_manifest": checkpoint.file_checksum(Path(out) / "customize" / "manifest.json"),
                "count": count, "context": context, "guidance": guidance}
    _write_json(d / "manifest.json", manifest)
    return manifest


def evaluate_embeddings(fx: Fixture, emb, image, mask_face, seed, n_per_context=2,
                        guidance=None) -> EvalReport:
    """Metric battery over 8 contexts x ``n_per_context`` generations."""
    nc = fx.world.config.n_contexts
    contexts = [c for c in range(nc) for _ in range(n_per_context)]
    if len(contexts) < 2:
        raise ValueError("need at least two samples for pairwise metrics")
    noise_seeds = [[seed, 0xE7A1, i] for i in range(len(contexts))]
    guidance = fx.cfg.guidance_scale if guidance is None else guidance
    imgs = generate(fx, emb, contexts, noise_seeds, guidance)
    return score_images(fx, imgs, contexts, image, mask_face, seed)


def score_images(fx: Fixture, imgs, contexts, image, mask_face, seed=0) -> EvalReport:
    imgs = list(imgs)
    if len(imgs) < 2:
        raise ValueError("need at least two samples for pairwise metrics")
    ref = np.asarray(image)
    sim = identity_similarity(imgs, ref, fx.extractor, mask_face)
    div = pairwise_diversity(imgs, lambda im: perceptual_features(im, mask_face))
    tdiv = trusted_diversity(imgs, ref, fx.extractor, mask_face)
    fid = frechet_distance(_features(fx.extractor, imgs), fx.pseudo_features(seed))
    probs = fx.probe.probabilities(imgs)
    pa = float(np.mean(probs[np.arange(len(imgs)), contexts]))
    generic = GenericEncoder(fx.world.config.size ** 2)
    gi = _features(generic, imgs + [ref])
    clip_i = float(np.mean([cosine(f, gi[-1]) for f in gi[:-1]]))
    return EvalReport(sim, div, tdiv, fid, pa, len(imgs), clip_i)


def _sweep(fx: Fixture, base: ExperimentConfig, settings):
    """Average metrics over eval_identities held-out identities x eval_seeds seeds."""
    ids = fx.world.heldout_ids()[:base.eval_identities]
    rows, times = [], {}
    for label, over in settings:
        cfg = base.replace(**over)
        reps, fr, el = [], [], 0.0
        for ident in ids:
            for seed in range(base.seed, base.seed + base.eval_seeds):
                run = cfg.replace(seed=seed)
                image, mf, mh = input_sample(fx, int(ident), seed)
                res, elapsed = customize_once(fx, run, image, mf, mh)
                el += elapsed
                reps.append(evaluate_embeddings(fx, res.embeddings, image, mf, seed,
                                                base.samples_per_context))
                fr.append(embedding_stats(res.embeddings, fx.prior(cfg.prior_mode)[0]).frechet_to_prior)
        mean = {c: float(np.mean([getattr(r, c) for r in reps])) for c in EVAL_COLUMNS}
        mean["frechet_to_prior"] = float(np.mean(fr))
        mean["sample_count"] = int(sum(r.sample_count for r in reps))
        mean["runs"] = len(reps)
        rows.append((label, over, mean))
        times[label] = el
    return rows, times


def _write_sweep_csv(rows, path, key, extra=None):
    cols = list(EVAL_COLUMNS) + ["frechet_to_prior", "runs", "sample_count"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([key] + (list(extra) if extra else []) + cols)
        for label, over, mean in rows:
            head = [label] + ([extra[k](over) for k in extra] if extra else [])
            w.writerow(head + [_fmt(mean[c]) if isinstance(mean[c], float) else mean[c]
                               for c in cols])


def cmd_evaluate(cfg: ExperimentConfig, out, preset=None) -> dict:
    fx = load_fixture(out, cfg)
    cfg = fx.cfg
    d = _dirs(out, "evaluate")
    t0 = time.perf_counter()
    if preset is None:
        emb, image, mf, cman = _customized(out, fx)
        rep = evaluate_embeddings(fx, emb, image, mf, cfg.seed, cfg.samples_per_context)
        source = cman["source"]
        key = source.get("identity", source.get("image"))
        path = d / "eval.csv"
        # one identity per run, so the aggregate row repeats it
        write_eval_csv([((key, "contexts"), rep), (("all", "contexts"), rep)], path)
        result = {"report": dataclasses.asdict(rep)}
    elif preset == "ablation":
        rows, _ = _sweep(fx, cfg, ABLATION_ROWS)
        path = d / "ablation.csv"
        _write_sweep_csv(rows, path, "setting")
        result = {"rows": [r[0] for r in rows]}
    elif preset == "alpha":
        rows, _ = _sweep(fx, cfg, [(_fmt(a), {"alpha": a}) for a in ALPHA_SWEEP])
        path = d / "alpha_sweep.csv"
        _write_sweep_csv(rows, path, "alpha", {
            "recommended": lambda over: int(over["alpha"] in RECOMMENDED_ALPHAS)})
        result = {"rows": [r[0] for r in rows]}
    else:
        raise ValueError(f"unknown preset {preset!r} (expected ablation or alpha)")
    manifest = {"command": "evaluate", "config": cfg.to_dict(), "preset": preset,
                "pretrain_manifest": fx.manifest_hash, "output": path.name,
                "output_checksum": checkpoint.file_checksum(path), **result}
    _write_json(d / "manifest.json", manifest)
    _write_json(d / "timing.json", {"evaluate": time.perf_counter() - t0})
    return manifest


def cmd_analyze(cfg: ExperimentConfig, out) -> dict:
    """Range/distance statistics and a 2-D projection of prior and learned embeddings.

    Learned sets come from customizing the first ``eval_identities`` held-out
    identities with and without AdaIN; ``raw_x10`` is the prior scaled by ten
    as a fixed far-from-prior reference.
    """
    fx = load_fixture(out, cfg)
    cfg = fx.cfg
    d = _dirs(out, "analyze")
    prior = fx.prior(cfg.prior_mode)[0]
    sets = {"prior": (prior.C, 0.0), "raw_x10": (prior.C * 10.0, 0.0)}
    for label, use_adain in (("adain", True), ("no_adain", False)):
        embs, el = [], 0.0
        for ident in fx.world.heldout_ids()[:cfg.eval_identities]:
            image, mf, mh = input_sample(fx, int(ident), cfg.seed)
            res, elapsed = customize_once(fx, cfg.replace(use_adain=use_adain), image, mf, mh)
            embs.append(res.embeddings)
            el += elapsed
        sets[label] = (np.concatenate(embs), el)
    stats = [(k, embedding_stats(e, prior, el)) for k, (e, el) in sets.items()]
    write_stats_csv(stats, d / "stats.csv")
    order = ["prior", "adain", "no_adain"]
    allpts = np.concatenate([sets[k][0] for k in order])
    labels = [f"{k}:{i}" for k in order for i in range(len(sets[k][0]))]
    xy = project_2d(allpts)
    write_projection_csv(labels, xy, d / "projection.csv")
    groups = [order.index(l.split(":")[0]) for l in labels]
    _write_p5(scatter_raster(xy, groups), d / "scatter.pgm")
    summary = {k: {"max": st.max, "min": st.min, "frechet_to_prior": st.frechet_to_prior,
                   "rows": len(sets[k][0])} for k, st in stats}
    manifest = {"command": "analyze", "config": cfg.to_dict(),
                "pretrain_manifest": fx.manifest_hash, "sets": summary}
    _write_json(d / "manifest.json", manifest)
    _write_json(d / "timing.json", {k: st.training_time_s for k, st in stats})
    return manifest


# -- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sidl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output root (default: $SIDL_OUT or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the frozen fixture")
    c = sub.add_parser("customize", parents=[common], help="learn one identity")
    c.add_argument("--identity", type=int, help="toy identity id (default: config identity)")
    c.add_argument("--image", help="input PGM instead of a toy identity")
    c.add_argument("--face-mask", help="face mask PGM for --image")
    c.add_argument("--hair-mask", help="hair mask PGM for --image")
    s = sub.add_parser("sample", parents=[common], help="generate with the learned identity")
    s.add_argument("--context", help="context id, or 'none' for the bare identity prompt")
    s.add_argument("--count", type=int)
    s.add_argument("--guidance", type=float)
    e = sub.add_parser("evaluate", parents=[common], help="metric battery or a preset table")
    e.add_argument("--preset", choices=["ablation", "alpha"])
    sub.add_parser("analyze", parents=[common], help="embedding statistics and projection")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or os.environ.get("SIDL_OUT") or "runs"
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "pretrain":
            res = cmd_pretrain(cfg, out)
        elif args.command == "customize":
            if args.identity is not None:
                cfg = cfg.replace(identity=args.identity)
            res = cmd_customize(cfg, out, args.image, args.face_mask, args.hair_mask)
        elif args.command == "sample":
            ctx = None if args.context == "none" else (
                int(args.context) if args.context is not None else cfg.context)
            res = cmd_sample(cfg, out, ctx, args.count, args.guidance)
        elif args.command == "evaluate":
            res = cmd_evaluate(cfg, out, args.preset)
        else:
            res = cmd_analyze(cfg, out)
    except (PipelineError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"sidl {args.command}: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({k: v for k, v in res.items() if k != "config"}, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
