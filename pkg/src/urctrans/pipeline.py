"""End-to-end helpers shared by the CLI and the benchmark."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import (
    CandidateRegion,
    ScanManifest,
    Volume,
    generate_phantom_scan,
    read_candidate_manifest,
    read_manifest,
    read_volume,
    write_candidate_manifest,
    write_manifest,
    write_volume,
)
from .evaluation import ScoredCandidate, cpm_score, froc_curve
from .finetune import SamplerConfig, candidate_inputs, finetune_run, surgery_load
from .pretrain import (
    PretrainState,
    build_pretrain_corpus,
    encoder_subset,
    init_pretrain_state,
    pair_similarity,
    pretrain_run,
    save_corpus,
)
from .tensorcore.optim import OptimState
from .vit3d import init_vit_params, predict_proba


def scan_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 0xC7, index]).generate_state(1)[0])


@dataclass
class Dataset:
    volumes: dict[str, Volume]
    manifests: dict[str, ScanManifest]
    train_ids: list[str]
    test_ids: list[str]

    def candidates(self, split: str, extent: int) -> list[CandidateRegion]:
        ids = self.train_ids if split == "train" else self.test_ids
        return [c for s in ids for c in self.manifests[s].candidates(extent)]


def generate_dataset(cfg: RunConfig) -> Dataset:
    n = cfg.data.n_train_scans + cfg.data.n_test_scans
    vols, mans, ids = {}, {}, []
    for i in range(n):
        sid = f"scan_{i:03d}"
        vol, man = generate_phantom_scan(replace(cfg.phantom, seed=scan_seed(cfg.seed, i)), sid)
        vols[sid], mans[sid] = vol, man
        ids.append(sid)
    return Dataset(vols, mans, ids[: cfg.data.n_train_scans], ids[cfg.data.n_train_scans :])


def write_dataset(ds: Dataset, cfg: RunConfig, out_dir) -> None:
    scans = os.path.join(out_dir, "scans")
    os.makedirs(scans, exist_ok=True)
    for sid in ds.train_ids + ds.test_ids:
        write_volume(os.path.join(scans, sid + ".vol"), ds.volumes[sid])
        write_manifest(os.path.join(scans, sid + ".json"), ds.manifests[sid])
    with open(os.path.join(out_dir, "splits.json"), "w", encoding="utf-8") as fh:
        json.dump({"train": ds.train_ids, "test": ds.test_ids}, fh, indent=1)
    extent = cfg.phantom.candidate_extent
    write_candidate_manifest(os.path.join(out_dir, "train_candidates.json"), ds.candidates("train", extent))
    write_candidate_manifest(os.path.join(out_dir, "test_candidates.json"), ds.candidates("test", extent))
    cubes, sources = build_pretrain_corpus([ds.volumes[s] for s in ds.train_ids], cfg.augment.S1)
    save_corpus(os.path.join(out_dir, "corpus"), cubes, [ds.train_ids[i] for i in sources])


def read_dataset(data_dir) -> Dataset:
    with open(os.path.join(data_dir, "splits.json"), encoding="utf-8") as fh:
        splits = json.load(fh)
    vols, mans = {}, {}
    for sid in splits["train"] + splits["test"]:
        vols[sid] = read_volume(os.path.join(data_dir, "scans", sid + ".vol"))
        mans[sid] = read_manifest(os.path.join(data_dir, "scans", sid + ".json"))
    return Dataset(vols, mans, splits["train"], splits["test"])


def read_split_candidates(data_dir, split: str, extent: int) -> list[CandidateRegion]:
    return read_candidate_manifest(os.path.join(data_dir, f"{split}_candidates.json"), extent)


def run_pretraining(cubes: Sequence[np.ndarray], cfg: RunConfig, log=None, checkpoint_dir=None) -> PretrainState:
    state = init_pretrain_state(cfg.vit, cfg.pretrain, cfg.seed, cfg.dtype)
    state.optim = OptimState.for_params(
        state.online,
        lr=cfg.pretrain.lr,
        weight_decay=cfg.pretrain.weight_decay,
        beta1=cfg.optim.beta1,
        beta2=cfg.optim.beta2,
        eps=cfg.optim.eps,
    )
    return pretrain_run(
        cubes, cfg.vit, cfg.augment, cfg.pretrain, cfg.seed, state=state, log=log, checkpoint_dir=checkpoint_dir
    )


def initial_params(cfg: RunConfig, pretrained=None) -> dict:
    if pretrained is None:
        return init_vit_params(cfg.vit, np.random.default_rng([cfg.seed, 0xF7]), cfg.dtype)
    return surgery_load(pretrained, cfg.vit, seed=cfg.seed, dtype=cfg.dtype)


def run_finetune(ds_or_inputs, cfg: RunConfig, params: dict, out_dir=None):
    x, y = ds_or_inputs
    sampler = SamplerConfig(cfg.sampler.positive_ratio, cfg.sampler.batch_size, cfg.seed)
    return finetune_run(x, y, params, cfg.vit, cfg.finetune, sampler, out_dir=out_dir)


def score_candidates(params, volumes, candidates: Sequence[CandidateRegion], cfg: RunConfig) -> list[ScoredCandidate]:
    x, _ = candidate_inputs(volumes, candidates)
    prob = predict_proba(x.astype(cfg.dtype), params, cfg.vit)[:, 1].astype(np.float64)
    return [ScoredCandidate(c.scan_id, float(np.clip(p, 0.0, 1.0)), c.label) for c, p in zip(candidates, prob)]


@dataclass
class BenchmarkResult:
    seed: int
    cpm_pretrained: float
    cpm_scratch: float
    pos_similarity: float
    neg_similarity: float
    first_loss: float
    final_loss: float


def benchmark_seed(cfg: RunConfig, heldout_cubes: int = 32) -> BenchmarkResult:
    """Pretrained-vs-scratch CPM on the test scans for one seed.

    Cosine similarities are measured on cubes tiled from the test scans.
    """
    ds = generate_dataset(cfg)
    cubes, _ = build_pretrain_corpus([ds.volumes[s] for s in ds.train_ids], cfg.augment.S1)
    state = run_pretraining(cubes, cfg)
    held, _ = build_pretrain_corpus([ds.volumes[s] for s in ds.test_ids], cfg.augment.S1)
    pos, neg = pair_similarity(encoder_subset(state.online), held[:heldout_cubes], cfg.vit, cfg.augment, cfg.seed)

    extent = cfg.vit.H
    train_c = ds.candidates("train", extent)
    test_c = ds.candidates("test", extent)
    train_xy = candidate_inputs(ds.volumes, train_c)
    cpms = []
    for pretrained in (state.online, None):
        params, _ = run_finetune(train_xy, cfg, initial_params(cfg, pretrained))
        scored = score_candidates(params, ds.volumes, test_c, cfg)
        cpms.append(cpm_score(froc_curve(scored)).cpm)
    return BenchmarkResult(cfg.seed, cpms[0], cpms[1], pos, neg, state.losses[0], state.losses[-1])
