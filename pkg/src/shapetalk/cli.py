"""Command-line entry points chaining the full workflow:

gen-data -> train-base -> train-metrics -> rank / correlate / sweep /
evaluate -> finetune / ablate -> report.

Every subcommand writes a ``manifest.json`` with content hashes of its
inputs and outputs, the canonical config hash, and wall time, making re-runs
verifiable by hash alone.
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

import torch

from . import checkpoints, config as config_mod, pipelines, report as report_mod
from .finetune import (TrainConfig, ablate, finetune, write_ablation_csv,
                       write_log_csv)
from .metrics.encoders import (AttrClassifier, AugContrastiveEncoder,
                               DualEncoder, SimilarityBackends,
                               train_similarity_encoders)
from .metrics.text import CorpusStats
from .models.captioner import Captioner
from .models.diffuser import Diffuser
from .rngs import torch_stream
from .shapeworld.dataset import ShapeWorldDataset, build_dataset
from .tokenizers import SubwordTokenizer, WordTokenizer, build_transform
from .training import train_captioner, train_diffuser

COMMANDS = ("gen-data", "train-base", "train-metrics", "rank", "correlate",
            "sweep", "finetune", "ablate", "evaluate", "report")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out_dir, command, cfg, inputs, outputs, t0):
    manifest = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": {p: _sha256(p) for p in sorted(inputs) if os.path.isfile(p)},
        "outputs": {p: _sha256(p) for p in sorted(outputs) if os.path.isfile(p)},
        "git": _git_describe(),
        "wall_time_s": round(time.time() - t0, 3),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _dataset_files(data_dir):
    return [os.path.join(data_dir, n)
            for n in ("records.jsonl", "images.tstore", "meta.json")]


def _load_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    return ShapeWorldDataset(data_dir)


def _build_tokenizers(dataset, cfg):
    corpus = [c for r in dataset.split("train") for c in r.captions]
    word = WordTokenizer.train(corpus)
    sub = SubwordTokenizer.train(corpus, cfg["captioner"]["subword_vocab"])
    return sub, word


def _load_system(models_path):
    ckpt = checkpoints.load_checkpoint(models_path)
    sub = SubwordTokenizer(ckpt.vocabs["subword"])
    word = WordTokenizer(ckpt.vocabs["word"])
    cfg = ckpt.meta["run_config"]
    captioner = Captioner(config_mod.captioner_config(cfg, len(sub.vocab)))
    diffuser = Diffuser(config_mod.diffuser_config(cfg, len(word.vocab)))
    ckpt.load_into("captioner", captioner)
    ckpt.load_into("diffuser", diffuser)
    captioner.eval(), diffuser.eval()
    return pipelines.System(captioner, diffuser, sub, word), ckpt


def _load_backends(encoders_path):
    ckpt = checkpoints.load_checkpoint(encoders_path)
    word = WordTokenizer(ckpt.vocabs["word"])
    dual = DualEncoder(len(word.vocab))
    aug = AugContrastiveEncoder()
    clf = AttrClassifier()
    ckpt.load_into("clip", dual)
    ckpt.load_into("aug", aug)
    ckpt.load_into("clf", clf)
    dual.eval(), aug.eval(), clf.eval()
    return SimilarityBackends(dual, aug, clf, word)


def _domain_records(dataset, limit=None):
    out = {}
    for domain in ("in", "near", "out"):
        records = dataset.split("test", domain)
        out[domain] = records[:limit] if limit else records
    return out


def _corpus_stats(dataset):
    return CorpusStats.from_corpus(
        [r.captions for r in dataset.split("train")]
    )


def cmd_gen_data(cfg, args, t0):
    data_dir = os.path.join(args.out, "dataset")
    build_dataset(config_mod.dataset_config(cfg), data_dir)
    return [], _dataset_files(data_dir)


def cmd_train_base(cfg, args, t0):
    dataset = _load_dataset(args.data)
    sub, word = _build_tokenizers(dataset, cfg)
    torch.manual_seed(cfg["seed"])
    captioner = Captioner(config_mod.captioner_config(cfg, len(sub.vocab)))
    diffuser = Diffuser(config_mod.diffuser_config(cfg, len(word.vocab)))
    cc, dc = cfg["captioner"], cfg["diffuser"]
    log = (lambda tag: (lambda ep, loss: print(f"{tag} epoch {ep}: {loss:.4f}",
                                               flush=True)))
    train_captioner(captioner, sub, dataset, seed=cfg["seed"],
                    epochs=cc["epochs"], batch_size=cc["batch_size"],
                    lr=cc["lr"], log=log("captioner"))
    train_diffuser(diffuser, word, dataset, seed=cfg["seed"],
                   epochs=dc["epochs"], batch_size=dc["batch_size"],
                   lr=dc["lr"], cond_dropout=dc["cond_dropout"],
                   log=log("diffuser"))
    path = os.path.join(args.out, "base.tstore")
    checkpoints.save_checkpoint(
        path, {"captioner": captioner, "diffuser": diffuser},
        meta={"run_config": cfg},
        vocabs={"subword": sub.vocab, "word": word.vocab},
        transform=build_transform(sub, word),
    )
    return _dataset_files(args.data), [path]


def cmd_train_metrics(cfg, args, t0):
    dataset = _load_dataset(args.data)
    _, word = _build_tokenizers(dataset, cfg)
    m = cfg["metrics"]
    backends = train_similarity_encoders(
        dataset, word, seed=cfg["seed"], epochs=m["epochs"],
        batch_size=m["batch_size"], lr=m["lr"],
        retrieval_target=m["retrieval_target"], f1_target=m["f1_target"],
    )
    path = os.path.join(args.out, "encoders.tstore")
    checkpoints.save_checkpoint(
        path, {"clip": backends.dual, "aug": backends.aug, "clf": backends.clf},
        meta={"run_config": cfg}, vocabs={"word": word.vocab},
    )
    return _dataset_files(args.data), [path]


def _pipeline_inputs(args):
    return _dataset_files(args.data) + [args.models, args.encoders]


def cmd_rank(cfg, args, t0):
    dataset = _load_dataset(args.data)
    system, _ = _load_system(args.models)
    backends = _load_backends(args.encoders)
    p = cfg["pipeline"]
    records = dataset.split("test", "in")[: p["records"]]
    path = os.path.join(args.out, "ranked.csv")
    import csv as _csv

    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(("input_id", "rank", "similarity", "caption"))
        for record in records:
            rng = torch_stream(cfg["seed"], "rank", record.id)
            image = torch.from_numpy(dataset.image(record.id))
            ranked = pipelines.rank_captions(
                system, backends, image, n=p["n"], sampler=p["sampler"],
                sampler_params=p["sampler_params"], backend=p["backend"],
                rng=rng, steps=p["steps"], guidance_scale=p["guidance_scale"],
            )
            for cand in ranked:
                w.writerow((record.id, cand.rank,
                            f"{cand.similarity:.6f}", cand.candidate))
    return _pipeline_inputs(args), [path]


def cmd_correlate(cfg, args, t0):
    dataset = _load_dataset(args.data)
    system, _ = _load_system(args.models)
    backends = _load_backends(args.encoders)
    p = cfg["pipeline"]
    records = dataset.split("test", "in")[: p["records"]]
    table = pipelines.correlation_study(
        system, backends, dataset, records, _corpus_stats(dataset),
        n=p["n"], sampler=p["sampler"], sampler_params=p["sampler_params"],
        backend=p["backend"], seed=cfg["seed"], steps=p["steps"],
        guidance_scale=p["guidance_scale"],
    )
    csv_path = os.path.join(args.out, "correlation.csv")
    table.write_csv(csv_path)
    summary_path = os.path.join(args.out, "correlation_summary.json")
    with open(summary_path, "w") as f:
        json.dump({
            "n": table.n, "sampler": table.sampler, "backend": table.backend,
            "spearman": {m: table.spearman(m) for m in table.bucket_means},
            "bucket_means": table.bucket_means,
        }, f, indent=2, sort_keys=True)
    return _pipeline_inputs(args), [csv_path, summary_path]


def cmd_sweep(cfg, args, t0):
    dataset = _load_dataset(args.data)
    system, _ = _load_system(args.models)
    backends = _load_backends(args.encoders)
    p = cfg["pipeline"]
    domain_records = _domain_records(dataset, p["records"])
    values = [float(v) if args.parameter == "p" else v
              for v in (args.values.split(",") if args.values else [])]
    if args.parameter == "n":
        values = [int(v) for v in values]
    if not values:
        values = {"p": [0.5, 0.7, 0.9, 0.95], "n": [1, 2, 5, 10],
                  "sampler": ["top_p", "top_k", "tempered"]}[args.parameter]
    rows = pipelines.sweep(
        system, backends, dataset, domain_records, _corpus_stats(dataset),
        args.parameter, values, n=p["n"], sampler=p["sampler"],
        seed=cfg["seed"], steps=p["steps"], guidance_scale=p["guidance_scale"],
    )
    path = os.path.join(args.out, "sweep.csv")
    pipelines.write_sweep_csv(rows, path)
    return _pipeline_inputs(args), [path]


def cmd_evaluate(cfg, args, t0):
    dataset = _load_dataset(args.data)
    system, _ = _load_system(args.models)
    backends = _load_backends(args.encoders)
    p = cfg["pipeline"]
    domain_records = _domain_records(dataset, p["records"])
    rows = pipelines.selection_vs_baseline(
        system, backends, dataset, domain_records, _corpus_stats(dataset),
        n=p["n"], sampler=p["sampler"], sampler_params=p["sampler_params"],
        backend=p["backend"], seed=cfg["seed"], steps=p["steps"],
        guidance_scale=p["guidance_scale"],
    )
    path = os.path.join(args.out, "selection.csv")
    pipelines.write_selection_csv(rows, path)
    outputs = [path]
    if args.images:
        img_rows = pipelines.image_selection_vs_baseline(
            system, backends, dataset, domain_records, n=p["n"],
            backend=p["backend"], seed=cfg["seed"], steps=p["steps"],
            guidance_scale=p["guidance_scale"],
        )
        img_path = os.path.join(args.out, "image_selection.csv")
        pipelines.write_selection_csv(img_rows, img_path)
        outputs.append(img_path)
    return _pipeline_inputs(args), outputs


def cmd_finetune(cfg, args, t0):
    dataset = _load_dataset(args.data)
    system, ckpt = _load_system(args.models)
    backends = _load_backends(args.encoders) if args.encoders else None
    train_cfg = config_mod.finetune_config(cfg)
    rows = finetune(
        system.captioner, system.diffuser, ckpt.transform,
        system.cap_tokenizer, system.dif_tokenizer, dataset, train_cfg,
        out_dir=args.out, backends=backends,
        resume_from=args.resume or None,
    )
    log_path = os.path.join(args.out, "training_log.csv")
    write_log_csv(rows, log_path)
    outputs = [log_path] + [
        os.path.join(args.out, f"finetune_ep{e + 1}.tstore")
        for e in range(train_cfg.epochs)
    ]
    inputs = _dataset_files(args.data) + [args.models]
    return inputs, outputs


def cmd_ablate(cfg, args, t0):
    dataset = _load_dataset(args.data)
    backends = _load_backends(args.encoders) if args.encoders else None
    train_cfg = config_mod.finetune_config(cfg)

    def load_base():
        system, _ = _load_system(args.models)
        return system.captioner, system.diffuser

    system, ckpt = _load_system(args.models)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablate(load_base, ckpt.transform, system.cap_tokenizer,
                  system.dif_tokenizer, dataset, train_cfg,
                  backends=backends, seeds=seeds)
    path = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(rows, path)
    return _dataset_files(args.data) + [args.models], [path]


def cmd_report(cfg, args, t0):
    result = report_mod.report(args.run or args.out, args.out)
    inputs = [os.path.join(args.run or args.out, n)
              for n in ("correlation.csv", "selection.csv", "sweep.csv",
                        "ablation.csv")]
    return inputs, result["outputs"]


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-metrics": cmd_train_metrics,
    "rank": cmd_rank,
    "correlate": cmd_correlate,
    "sweep": cmd_sweep,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="shapetalk",
        description="shape-world captioner/diffuser reconstruction workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out", default=None, help="output directory")
        if name not in ("gen-data", "report"):
            p.add_argument("--data", default=None, help="dataset directory")
        if name in ("rank", "correlate", "sweep", "finetune", "ablate", "evaluate"):
            p.add_argument("--models", default=None, help="base checkpoint path")
            p.add_argument("--encoders", default=None, help="similarity encoders checkpoint")
        if name == "sweep":
            p.add_argument("--parameter", default="n", choices=("p", "n", "sampler"))
            p.add_argument("--values", default="", help="comma-separated grid")
        if name == "finetune":
            p.add_argument("--resume", default="", help="checkpoint to resume from")
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
        if name == "evaluate":
            p.add_argument("--images", action="store_true",
                           help="also run the image-direction comparison")
        if name == "report":
            p.add_argument("--run", default=None, help="run directory with CSVs")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    t0 = time.time()
    try:
        cfg = (config_mod.load_config(args.config) if args.config
               else config_mod.validate_config({}))
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is None:
            raise config_mod.ConfigError("--out is required")
        for attr in ("data", "models", "encoders"):
            if hasattr(args, attr) and getattr(args, attr) in (None, ""):
                if attr == "data":
                    setattr(args, attr, os.path.join(args.out, "dataset"))
                elif attr == "encoders" and args.command in ("finetune", "ablate"):
                    setattr(args, attr, None)
                else:
                    raise config_mod.ConfigError(f"--{attr} is required for {args.command}")
    except config_mod.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    try:
        inputs, outputs = _HANDLERS[args.command](cfg, args, t0)
        _write_manifest(args.out, args.command, cfg, inputs, outputs, t0)
    except (config_mod.ConfigError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
