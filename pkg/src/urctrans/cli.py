"""``urctrans`` command line: gen-data, pretrain, finetune, evaluate, gradcheck, benchmark."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import pipeline
from .config import RunConfig
from .evaluation import cpm_score, export_csv, froc_curve, read_scores_csv, write_scores_csv
from .finetune import candidate_inputs, write_train_log
from .tensorcore.checkpoint import load_checkpoint, save_checkpoint
from .tensorcore.gradcheck import check_gradients
from .tensorcore import tensor as T
from .vit3d import TINY_CONFIG, ViTConfig, forward_classify, init_vit_params

log = logging.getLogger("urctrans")


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "input_size", None):
        cfg = cfg.with_input_size(args.input_size)
    if getattr(args, "positive_ratio", None) is not None:
        cfg = replace(cfg, sampler=replace(cfg.sampler, positive_ratio=args.positive_ratio))
    return cfg


def _prepare_out(args, cfg: RunConfig) -> str:
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    with open(os.path.join(args.out, "run_args.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(flags, indent=2, sort_keys=True) + "\n")
    return args.out


def _write_model_config(path, vit: ViTConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vit.to_json() + "\n")


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    ds = pipeline.generate_dataset(cfg)
    pipeline.write_dataset(ds, cfg, out)
    log.info("wrote %d scans to %s", len(ds.train_ids) + len(ds.test_ids), out)
    return 0


def cmd_pretrain(args) -> int:
    from .pretrain import load_corpus

    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    cubes, _ = load_corpus(os.path.join(args.data, "corpus"))
    rows = []

    def on_step(step, lr, loss):
        rows.append((step, lr, loss))
        if step % 50 == 0:
            log.info("pretrain step %d loss %.4f", step, loss)

    state = pipeline.run_pretraining(cubes, cfg, log=on_step, checkpoint_dir=out)
    save_checkpoint(os.path.join(out, "pretrained.uctk"), state.online)
    _write_model_config(os.path.join(out, "model_config.json"), cfg.vit)
    write_train_log(os.path.join(out, "pretrain_log.csv"), rows)
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    if not args.from_scratch and not args.pretrained:
        raise SystemExit("finetune needs --pretrained PATH or --from-scratch")
    out = _prepare_out(args, cfg)
    ds = pipeline.read_dataset(args.data)
    cands = ds.candidates("train", cfg.vit.H)
    params = pipeline.initial_params(cfg, None if args.from_scratch else args.pretrained)
    pipeline.run_finetune(candidate_inputs(ds.volumes, cands), cfg, params, out_dir=out)
    _write_model_config(os.path.join(out, "model_config.json"), cfg.vit)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    if args.scores:
        scored = read_scores_csv(args.scores)
    else:
        if not (args.checkpoint and args.data):
            raise SystemExit("evaluate needs --scores CSV or both --checkpoint and --data")
        params = {k: v.astype(cfg.dtype) for k, v in load_checkpoint(args.checkpoint).items()}
        ds = pipeline.read_dataset(args.data)
        scored = pipeline.score_candidates(params, ds.volumes, ds.candidates(args.split, cfg.vit.H), cfg)
    write_scores_csv(os.path.join(out, "scores.csv"), scored)
    curve = froc_curve(scored, literal_fps=args.literal_fps)
    report = cpm_score(curve)
    export_csv(curve, report, os.path.join(out, "froc.csv"), os.path.join(out, "cpm.csv"))
    print(f"CPM {report.cpm:.6f}")
    return 0


def gradcheck_results(vit: ViTConfig = TINY_CONFIG, seed: int = 0, batch: int = 2):
    rng = np.random.default_rng(seed)
    params = init_vit_params(vit, rng, np.float64)
    # non-trivial affine terms so every parameter carries gradient signal
    for k in params:
        if k.endswith(("gamma", "beta", "bias")):
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    x = rng.random((batch, *vit.input_shape))
    y = np.arange(batch) % vit.C

    def loss(p):
        return T.cross_entropy(forward_classify(x, p, vit), y)

    return check_gradients(loss, params)


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args) if args.config else RunConfig(seed=args.seed or 0)
    results = gradcheck_results(cfg.vit, cfg.seed)
    worst = max(r.rel_error for r in results)
    if args.out:
        _prepare_out(args, cfg)
        with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "rel_error"])
            for r in results:
                w.writerow([r.name, f"{r.rel_error:.3e}"])
    ok = worst < args.tolerance
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} over {len(results)} tensors")
    return 0 if ok else 1


def cmd_benchmark(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    rows = []
    for s in range(args.seeds):
        res = pipeline.benchmark_seed(replace(cfg, seed=cfg.seed + s))
        rows.append(asdict(res))
        print(json.dumps(rows[-1]))
    with open(os.path.join(out, "benchmark.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urctrans", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen-data", help="phantom scans, manifests and pretraining corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised candidate classification")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", help="pretraining checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--input-size", type=int)
    p.add_argument("--positive-ratio", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="FROC curve and CPM")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--scores", help="scored-candidate CSV (scan_id,score,label)")
    p.add_argument("--input-size", type=int)
    p.add_argument("--literal-fps", action="store_true", help="FPS = FPR*TN/NS instead of FP/NS")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check on the tiny model")
    common(p, out_required=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="pretrained vs from-scratch CPM over seeds")
    common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
