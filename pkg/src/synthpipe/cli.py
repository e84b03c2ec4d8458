"""Batch command surface binding the pipeline stages.

Every stage reads its predecessors' artifacts from a single working
directory and writes its own under a stage-specific name, so the whole
intermediate state of a run stays inspectable. A lock file enforces one
run per workdir; each invocation appends one structured line to run.log.

Artifacts: captions.tsv, matches.tsv, stats.txt, balance_plan.tsv,
balanced.tsv, manifest.tsv + images/, params.bin, loss_curve.tsv,
metrics.tsv, nsfw_flags.tsv.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
from pathlib import Path

from . import balance as balance_mod
from . import captions as captions_mod
from . import concepts as concepts_mod
from . import evaluation as eval_mod
from . import images as images_mod
from . import matching as matching_mod
from . import trainer as trainer_mod
from .clients import HttpChatClient, HttpTtiClient, MockChatClient, MockConceptClassifier
from .config import RunConfig, load_config
from .store import DatasetStore, verify_dataset

log = logging.getLogger("synthpipe")

ARTIFACTS = {
    "captions": "captions.tsv",
    "captions_partial": "captions.partial.tsv",
    "done_concepts": "captions.done_concepts.txt",
    "matches": "matches.tsv",
    "stats": "stats.txt",
    "plan": "balance_plan.tsv",
    "balanced": "balanced.tsv",
    "manifest": "manifest.tsv",
    "params": "params.bin",
    "curve": "loss_curve.tsv",
    "metrics": "metrics.tsv",
    "nsfw": "nsfw_flags.tsv",
}

# artifact -> stage that produces it, for dependency error messages
_PRODUCED_BY = {
    "captions.tsv": "gen-captions",
    "matches.tsv": "match",
    "balanced.tsv": "balance",
    "manifest.tsv": "gen-images",
    "params.bin": "train",
}


class StageError(RuntimeError):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def _require(workdir: Path, *names: str) -> None:
    for name in names:
        if not (workdir / name).exists():
            stage = _PRODUCED_BY[name]
            raise StageError(
                f"missing artifact '{name}' from stage '{stage}'; run '{stage}' first",
                exit_code=2,
            )


def _write_lines(path: Path, lines: list[str]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, path)


def _read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def _log_run(workdir: Path, command: str, status: str, detail: dict) -> None:
    entry = {
        "ts": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "command": command,
        "status": status,
        "detail": detail,
    }
    with open(workdir / "run.log", "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


class WorkdirLock:
    def __init__(self, workdir: Path):
        self.path = workdir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(
                f"workdir is locked by another run ({self.path}); remove the "
                "lock file if that run is gone",
                exit_code=2,
            )
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def _load_bank(cfg: RunConfig, override: str | None) -> concepts_mod.ConceptBank:
    path = override or str(cfg["concepts"]["file"])
    if not path:
        raise StageError("no concepts file configured ([concepts] file or --concepts)", 2)
    if not Path(path).exists():
        raise StageError(f"concepts file not found: {path}", 2)
    with open(path, "r", encoding="utf-8") as f:
        return concepts_mod.load_concepts(f, name=Path(path).stem)


def _chat_client(cfg: RunConfig, mock: bool):
    if mock:
        return MockChatClient()
    endpoint = str(cfg["captions"]["endpoint"])
    if not endpoint:
        raise StageError("no chat endpoint configured ([captions] endpoint); use --mock for offline runs", 2)
    return HttpChatClient(
        endpoint=endpoint,
        model=str(cfg["captions"]["model"]),
        api_key=cfg.api_key("captions"),
    )


def _generation_config(cfg: RunConfig) -> captions_mod.GenerationConfig:
    c = cfg["captions"]
    return captions_mod.GenerationConfig(
        n_per_concept=int(c["n_per_concept"]),
        max_words=int(c["max_words"]),
        max_attempts=int(c["max_attempts"]),
        dedup=bool(c["dedup"]),
        drop_concept_absent=bool(c["drop_concept_absent"]),
    )


def _tti_params(cfg: RunConfig) -> images_mod.TtiParams:
    i = cfg["images"]
    return images_mod.TtiParams(
        guidance_scale=float(i["guidance_scale"]),
        num_steps=int(i["num_steps"]),
        gen_width=int(i["gen_width"]),
        gen_height=int(i["gen_height"]),
        store_size=int(i["store_size"]),
        seed_base=cfg.seed,
    )


def _train_config(cfg: RunConfig) -> trainer_mod.TrainConfig:
    t = cfg["train"]
    return trainer_mod.TrainConfig(
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        base_lr=float(t["base_lr"]),
        weight_decay=float(t["weight_decay"]),
        warmup_epochs=int(t["warmup_epochs"]),
        seed=cfg.seed,
        embed_dim=int(t["embed_dim"]),
        augment=bool(t["augment"]),
    )


# ---------------------------------------------------------------- stages


def stage_gen_captions(cfg: RunConfig, args) -> dict:
    bank = _load_bank(cfg, args.concepts)
    client = _chat_client(cfg, args.mock)
    gen_cfg = _generation_config(cfg)
    workdir = cfg.workdir

    skip: set[int] = set()
    prior: list[captions_mod.CaptionRecord] = []
    partial_path = workdir / ARTIFACTS["captions_partial"]
    done_path = workdir / ARTIFACTS["done_concepts"]
    if partial_path.exists() and done_path.exists():
        prior = captions_mod.parse_caption_lines(_read_lines(partial_path))
        skip = {int(line) for line in _read_lines(done_path) if line}
        log.info("resuming caption generation: %d concepts already done", len(skip))

    try:
        fresh = captions_mod.generate_captions(
            bank, client, gen_cfg, cfg.seed, concurrency=cfg.concurrency, skip_concepts=skip
        )
    except captions_mod.CaptionGenerationAborted as exc:
        merged = sorted(prior + exc.partial, key=lambda r: r.id)
        _write_lines(partial_path, captions_mod.captions_to_lines(merged))
        _write_lines(done_path, [str(cid) for cid in sorted(exc.done_concepts)])
        raise StageError(
            f"{exc}; partial output checkpointed to {partial_path.name}, rerun to resume"
        )

    records = sorted(prior + fresh, key=lambda r: r.id)
    _write_lines(workdir / ARTIFACTS["captions"], captions_mod.captions_to_lines(records))
    partial_path.unlink(missing_ok=True)
    done_path.unlink(missing_ok=True)
    return {"captions": len(records), "concepts": bank.size}


def _matcher(cfg: RunConfig, bank, args=None) -> matching_mod.Matcher:
    raw = bool(cfg["matching"]["raw_substring"])
    if args is not None and getattr(args, "raw_substring", False):
        raw = True
    return matching_mod.Matcher(bank, word_boundary=not raw)


def stage_match(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["captions"])
    bank = _load_bank(cfg, args.concepts)
    matcher = _matcher(cfg, bank, args)
    records = captions_mod.parse_caption_lines(_read_lines(workdir / ARTIFACTS["captions"]))
    lines = []
    for r in records:
        ids = sorted(matcher.match_caption(r.text))
        lines.append(f"{r.id}\t{','.join(map(str, ids))}")
    _write_lines(workdir / ARTIFACTS["matches"], lines)
    return {"captions": len(records)}


def _load_matches(workdir: Path) -> dict[int, frozenset[int]]:
    matches = {}
    for line in _read_lines(workdir / ARTIFACTS["matches"]):
        if not line:
            continue
        cid, _, ids = line.partition("\t")
        matches[int(cid)] = frozenset(int(x) for x in ids.split(",") if x)
    return matches


def stage_stats(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["captions"])
    bank = _load_bank(cfg, args.concepts)
    matcher = _matcher(cfg, bank, args)
    records = captions_mod.parse_caption_lines(_read_lines(workdir / ARTIFACTS["captions"]))
    stats = matching_mod.corpus_stats(matcher, (r.text for r in records))
    table = matching_mod.format_stats_table(stats, dataset_name=workdir.name or "corpus")
    (workdir / ARTIFACTS["stats"]).write_text(table, encoding="utf-8")
    print(table, end="")
    return {"coverage_k1": stats.coverage[1]}


def stage_balance(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["captions"], ARTIFACTS["matches"])
    records = captions_mod.parse_caption_lines(_read_lines(workdir / ARTIFACTS["captions"]))
    matches = _load_matches(workdir)
    for r in records:
        r.matched_concept_ids = matches.get(r.id, frozenset())

    target = args.target_size or int(cfg["balance"]["target_size"])
    if target <= 0:
        raise StageError("no target size (use --target-size or [balance] target_size)", 2)

    random_mode = args.random_sampling or bool(cfg["balance"]["random_sampling"])
    detail: dict = {"target": target, "mode": "random" if random_mode else "balanced"}
    if random_mode:
        kept = balance_mod.sample_random(records, target, cfg.seed)
    else:
        counts: dict[int, int] = {}
        for r in records:
            for cid in r.matched_concept_ids:
                counts[cid] = counts.get(cid, 0) + 1
        plan = balance_mod.build_plan(
            records,
            counts,
            target,
            tolerance=float(cfg["balance"]["tolerance"]),
            combiner=str(cfg["balance"]["combiner"]),
        )
        kept = balance_mod.sample_balanced(records, plan, cfg.seed)
        _write_lines(
            workdir / ARTIFACTS["plan"],
            balance_mod.plan_to_lines(plan, {r.id for r in kept}),
        )
        detail.update(
            t_threshold=plan.t_threshold, expected_size=round(plan.expected_size, 3)
        )
        log.info(
            "balance: t=%.6g expected_size=%.2f target=%d",
            plan.t_threshold, plan.expected_size, target,
        )
    _write_lines(workdir / ARTIFACTS["balanced"], captions_mod.captions_to_lines(kept))
    detail["kept"] = len(kept)
    return detail


def stage_gen_images(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["balanced"])
    records = captions_mod.parse_caption_lines(_read_lines(workdir / ARTIFACTS["balanced"]))
    mock = args.mock or bool(cfg["images"]["mock"])
    if mock:
        backend: images_mod.TtiBackend = images_mod.MockTtiBackend()
    else:
        endpoint = str(cfg["images"]["endpoint"])
        if not endpoint:
            raise StageError("no TTI endpoint configured ([images] endpoint); use --mock for offline runs", 2)
        backend = images_mod.RemoteTtiBackend(
            HttpTtiClient(endpoint, api_key=cfg.api_key("images")),
            retries=int(cfg["images"]["retries"]),
        )
    entries = images_mod.run_generation(
        records, backend, _tti_params(cfg), cfg.concurrency, DatasetStore(workdir)
    )
    failed = sum(1 for e in entries if e.status != "ok")
    return {"rendered": len(entries), "failed": failed, "backend": backend.name}


def stage_train(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["manifest"])
    train_cfg = _train_config(cfg)
    data = trainer_mod.load_training_data(DatasetStore(workdir), keep_pixels=train_cfg.augment)
    params, curve = trainer_mod.train(data, train_cfg)
    trainer_mod.save_params(workdir / ARTIFACTS["params"], params)
    _write_lines(workdir / ARTIFACTS["curve"], trainer_mod.curve_to_lines(curve))
    return {"pairs": len(data), "first_loss": round(curve[0], 4), "final_loss": round(curve[-1], 4)}


def stage_eval(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["manifest"], ARTIFACTS["params"])
    bank = _load_bank(cfg, args.concepts)
    params = trainer_mod.load_params(workdir / ARTIFACTS["params"])
    data = trainer_mod.load_training_data(DatasetStore(workdir))
    if len(data) == 0:
        raise StageError("no usable pairs in the dataset")

    text_emb = trainer_mod.embed_text(params, data.text_feats)
    image_emb = trainer_mod.embed_image(params, data.image_feats)
    k = int(cfg["eval"]["recall_k"])
    retr = eval_mod.recall_at_k(image_emb, text_emb, k)

    class_ids = sorted(set(data.concept_ids))
    class_names = [bank.text_of(cid) for cid in class_ids]
    index_of = {cid: i for i, cid in enumerate(class_ids)}
    labels = [index_of[cid] for cid in data.concept_ids]
    zs = eval_mod.zero_shot_classify(params, data.image_feats, labels, class_names)

    lp = eval_mod.linear_probe(image_emb, labels, shots=None)
    min_class = min(labels.count(i) for i in range(len(class_ids)))
    shots = min(int(cfg["eval"]["shots"]), min_class)
    fs = eval_mod.linear_probe(image_emb, labels, shots=shots, seed=cfg.seed)

    report = eval_mod.MetricsReport(
        lin_prob=lp,
        few_shot=fs,
        img_ret=retr.text_to_image,
        text_ret=retr.image_to_text,
        zero_shot=zs,
    )
    _write_lines(workdir / ARTIFACTS["metrics"], report.to_lines())
    print(report.table(), end="")
    return dict(zip(eval_mod.TASKS, (round(v, 2) for v in report.values())))


def stage_delta_mtl(cfg: RunConfig, args) -> dict:
    model = eval_mod.MetricsReport.from_lines(_read_lines(Path(args.model)))
    baseline = eval_mod.MetricsReport.from_lines(_read_lines(Path(args.baseline)))
    value = eval_mod.delta_mtl(model, baseline)
    print(f"{value:+.1f}")
    return {"delta_mtl": value}


def stage_filter_nsfw(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    bank = _load_bank(cfg, args.concepts)
    if args.mock:
        denylist: set[str] = set()
        deny_path = str(cfg["nsfw"]["mock_denylist_file"])
        if deny_path:
            denylist = {
                concepts_mod.normalize_text(line)
                for line in _read_lines(Path(deny_path))
                if line.strip()
            }
        classifier = MockConceptClassifier(denylist=denylist)
    else:
        endpoint = str(cfg["nsfw"]["endpoint"])
        if not endpoint:
            raise StageError("no classifier endpoint configured ([nsfw] endpoint); use --mock for offline runs", 2)
        classifier = HttpChatClient(
            endpoint=endpoint, model=str(cfg["nsfw"]["model"]), api_key=cfg.api_key("nsfw")
        )
    out_path = workdir / ARTIFACTS["nsfw"]
    try:
        report = concepts_mod.flag_nsfw(
            bank, classifier, retries=int(cfg["nsfw"]["retries"]), concurrency=cfg.concurrency
        )
    except concepts_mod.NsfwAbortError as exc:
        _write_lines(out_path, concepts_mod.flag_report_to_lines(bank, exc.partial))
        raise StageError(f"{exc}; partial report persisted to {out_path.name}")
    _write_lines(out_path, concepts_mod.flag_report_to_lines(bank, report))
    print(f"flagged_fraction\t{report.flagged_fraction:.6g}")
    return {
        "flagged_fraction": report.flagged_fraction,
        "warnings": report.warnings,
    }


def stage_subset(cfg: RunConfig, args) -> dict:
    bank = _load_bank(cfg, args.concepts)
    if args.from_corpus:
        corpus = [line for line in _read_lines(Path(args.from_corpus)) if line.strip()]
        matcher = _matcher(cfg, bank, args)
        sub = concepts_mod.derive_subset_from_corpus(bank, corpus, matcher)
    elif args.random is not None:
        sub = concepts_mod.random_subset(bank, args.random, cfg.seed)
    else:
        raise StageError("subset requires --from-corpus FILE or --random N", 2)
    out = Path(args.out) if args.out else cfg.workdir / "concepts_subset.txt"
    _write_lines(out, sub.texts())
    return {"subset_size": sub.size, "out": str(out)}


def stage_verify(cfg: RunConfig, args) -> dict:
    workdir = cfg.workdir
    _require(workdir, ARTIFACTS["manifest"])
    report = verify_dataset(workdir / ARTIFACTS["manifest"], workdir)
    print(f"ok\t{report.ok_count}")
    print(f"failed\t{report.failed_count}")
    for cid, reason in report.corrupt:
        print(f"corrupt\t{cid}\t{reason}")
    if report.corrupt:
        raise StageError(f"{len(report.corrupt)} corrupt entries found")
    return {"ok": report.ok_count, "failed": report.failed_count}


def stage_pipeline(cfg: RunConfig, args) -> dict:
    detail = {}
    detail["gen-captions"] = stage_gen_captions(cfg, args)
    detail["match"] = stage_match(cfg, args)
    detail["stats"] = stage_stats(cfg, args)
    detail["balance"] = stage_balance(cfg, args)
    detail["gen-images"] = stage_gen_images(cfg, args)
    detail["train"] = stage_train(cfg, args)
    detail["eval"] = stage_eval(cfg, args)
    return detail


_STAGES = {
    "gen-captions": stage_gen_captions,
    "match": stage_match,
    "stats": stage_stats,
    "balance": stage_balance,
    "gen-images": stage_gen_images,
    "train": stage_train,
    "eval": stage_eval,
    "delta-mtl": stage_delta_mtl,
    "filter-nsfw": stage_filter_nsfw,
    "subset": stage_subset,
    "verify": stage_verify,
    "pipeline": stage_pipeline,
}

_NO_LOCK = {"delta-mtl"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="config file (INI sections)")
    common.add_argument("--workdir", default=None, help="override [run] workdir")
    common.add_argument("--seed", type=int, default=None, help="override [run] seed")
    common.add_argument("--concurrency", type=int, default=None, help="override [run] concurrency")
    common.add_argument("--concepts", default=None, help="override [concepts] file")

    parser = argparse.ArgumentParser(prog="synthpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add("gen-captions", help="generate captions for every concept")
    p.add_argument("--mock", action="store_true", help="use the offline deterministic backend")

    p = add("match", help="match concepts against generated captions")
    p.add_argument("--raw-substring", action="store_true", help="disable the word-boundary rule")

    p = add("stats", help="concept appearance statistics over the captions")
    p.add_argument("--raw-substring", action="store_true", help="disable the word-boundary rule")

    p = add("balance", help="subsample captions to the target size")
    p.add_argument("--target-size", type=int, default=None)
    p.add_argument("--random-sampling", action="store_true", help="uniform baseline sampler")

    p = add("gen-images", help="render images for the balanced captions")
    p.add_argument("--mock", action="store_true", help="use the offline deterministic backend")

    add("train", help="train the dual-encoder model on the dataset")
    add("eval", help="evaluate the trained model (five tasks)")

    p = add("delta-mtl", help="aggregate relative improvement of model vs baseline")
    p.add_argument("model", help="metrics file (task<TAB>value lines)")
    p.add_argument("baseline", help="baseline metrics file")

    p = add("filter-nsfw", help="flag concepts via the safety classifier")
    p.add_argument("--mock", action="store_true", help="use the offline denylist classifier")

    p = add("subset", help="derive a concept subset")
    p.add_argument("--from-corpus", default=None, help="caption corpus file for matching")
    p.add_argument("--random", type=int, default=None, help="random subset size")
    p.add_argument("--out", default=None, help="output concepts file")
    p.add_argument("--raw-substring", action="store_true", help="disable the word-boundary rule")

    add("verify", help="re-checksum the dataset against its manifest")

    p = add("pipeline", help="run all stages in order")
    p.add_argument("--mock", action="store_true")
    p.add_argument("--target-size", type=int, default=None)
    p.add_argument("--random-sampling", action="store_true")

    return parser


def _apply_overrides(cfg: RunConfig, args) -> None:
    if args.workdir is not None:
        cfg.values["run"]["workdir"] = args.workdir
    if args.seed is not None:
        cfg.values["run"]["seed"] = args.seed
    if args.concurrency is not None:
        cfg.values["run"]["concurrency"] = args.concurrency


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    # Subcommands without these flags still need the attributes downstream.
    for attr in ("mock", "random_sampling", "target_size", "concepts", "raw_substring"):
        if not hasattr(args, attr):
            setattr(args, attr, None)

    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    workdir = cfg.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    stage = _STAGES[args.command]

    def run() -> int:
        try:
            detail = stage(cfg, args)
        except StageError as exc:
            print(f"error: {exc}", file=sys.stderr)
            _log_run(workdir, args.command, "error", {"message": str(exc)})
            return exc.exit_code
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            _log_run(workdir, args.command, "error", {"message": str(exc)})
            return 1
        _log_run(workdir, args.command, "ok", detail)
        return 0

    if args.command in _NO_LOCK:
        return run()
    try:
        with WorkdirLock(workdir):
            return run()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
