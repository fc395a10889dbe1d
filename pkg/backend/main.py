"""dictutor: dictionary-grounded tutor dialogue pipeline.

    python main.py --seed 7 ingest data.txt --profile line --language amh
    python main.py --config run.json generate
    python main.py --config run.json build-dataset
    python main.py --config run.json evaluate --predictions preds.jsonl
    python main.py --config run.json judge
    python main.py --config run.json influence --train-grads t.bin --val-grads v.bin
    python main.py --config run.json report --reference judge-averages
"""

import functools
import json
import logging
import os
from typing import List, Optional

import click
from dotenv import load_dotenv

from app import dataset as ds
from app.config import PipelineConfig, load_config
from app.errors import ConfigurationError, CorpusValidationError, DataError, MetricInputError
from app.influence import filter_top, mean_influence, read_gradients, read_keep_list, write_keep_list
from app.ingest import PROFILES, SourceSpec, expected_dictionary_counts, ingest_sources, read_corpus, write_corpus
from app.judge import aggregate_verdicts, items_from_dialogues, items_from_predictions, judge_batch, read_results, result_row, verdict_scores
from app.jsonl import read_jsonl, write_json, write_jsonl
from app.logging_config import setup_logging
from app.metrics import CRITERIA, chrf_corpus, merge_scores, metric_columns, score_predictions, summarize_scores, weighted_kappa
from app.models import GenerationRecord
from app.orchestrator import load_records, run_batch
from app.report import criterion_table_report, frame_to_json, inventory_report, judge_averages_report, render
from app.templates import plan_batch

load_dotenv()

logger = logging.getLogger("dictutor")

PROVIDERS = ["mock", "openai-chat", "gemini"]

# ===========================================================================
# HELPERS
# ===========================================================================


class RunContext:
    def __init__(self, config_path, seed, strict, dry_run, progress, output_dir=None):
        self.config_path = config_path
        self.seed = seed
        self.output_dir = output_dir
        self.strict = strict
        self.dry_run = dry_run
        self.progress = progress
        self._config: Optional[PipelineConfig] = None

    @property
    def config(self) -> PipelineConfig:
        if self._config is None:
            self._config = load_config(self.config_path, seed=self.seed, output_dir=self.output_dir)
        return self._config

    def path(self, *parts: str) -> str:
        if self.config_path is None and self.seed is None:
            # report-only runs need no seed
            return os.path.join(self.output_dir or PipelineConfig.model_fields["output_dir"].default, *parts)
        return os.path.join(self.config.output_dir, *parts)


def exits_on_error(fn):
    """ConfigurationError -> exit 2, data problems -> exit 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as e:
            click.echo(f"❌ Configuration error: {e}", err=True)
            raise SystemExit(2)
        except (DataError, ValueError) as e:
            click.echo(f"❌ {e}", err=True)
            raise SystemExit(1)

    return wrapper


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path} (run the earlier pipeline step first)")
    return path


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, ensure_ascii=False))


def _write_report(base: str, payload: dict, text: str) -> None:
    write_json(base + ".json", payload)
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    with open(base + ".txt", "w", encoding="utf-8") as f:
        f.write(text + "\n")


# ===========================================================================
# CLI
# ===========================================================================


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Pipeline config (JSON).")
@click.option("--seed", type=int, default=None, help="Global seed; overrides the config.")
@click.option("--strict", is_flag=True, help="Treat validation warnings as failures.")
@click.option("--dry-run", is_flag=True, help="Plan only; never call a backend.")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.option("--no-progress", is_flag=True, help="Hide progress bars.")
@click.option("--output-dir", type=click.Path(file_okay=False), default=None, help="Run directory; overrides the config.")
@click.pass_context
def cli(ctx, config_path, seed, strict, dry_run, verbose, no_progress, output_dir):
    """Dictionary-grounded tutor dialogue pipeline."""
    setup_logging(verbose=verbose)
    ctx.obj = RunContext(config_path, seed, strict, dry_run, progress=not no_progress, output_dir=output_dir)


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("sources", nargs=-1, type=click.Path(dir_okay=False))
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="line", show_default=True)
@click.option("--language", default=None, help="ISO 639-3 code of the SOURCES.")
@click.option("--check-counts", is_flag=True, help="Compare per-language counts with the reference inventory.")
@click.pass_obj
@exits_on_error
def ingest(run: RunContext, sources, profile, language, check_counts):
    """Parse and normalize raw dictionary files into the corpus."""
    cfg = run.config
    specs = list(cfg.sources)
    if sources:
        if not language:
            raise click.UsageError("--language is required when source files are given")
        specs += [SourceSpec(path=p, profile=profile, language=language, source_id=os.path.basename(p)) for p in sources]
    if not specs:
        raise click.UsageError("no sources: pass files or list them under 'sources' in the config")
    cfg.model_copy(update={"sources": specs}).check_paths()

    entries, stats, rejects = ingest_sources(
        specs,
        languages=cfg.languages,
        strict=run.strict,
        expected=expected_dictionary_counts() if check_counts else None,
    )
    out_dir = run.path("corpus")
    write_corpus(out_dir, entries, stats, rejects)
    _echo_json(stats.model_dump(mode="json"))

    if rejects:
        click.echo(f"⚠️  {len(rejects)} unparseable units (see {os.path.join(out_dir, 'rejects.jsonl')})", err=True)
        if run.strict:
            raise CorpusValidationError(f"{len(rejects)} rejected units under --strict")
    click.echo(f"✅ {stats.total} entries written to {out_dir}", err=True)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--corpus", "corpus_path", type=click.Path(), default=None, help="Corpus file or directory.")
@click.option("--backend", "provider", type=click.Choice(PROVIDERS), default=None, help="Use this provider for every role.")
@click.pass_obj
@exits_on_error
def generate(run: RunContext, corpus_path, provider):
    """Plan generation requests from the corpus and run them."""
    cfg = run.config
    if provider:
        cfg = cfg.use_provider(provider)
    paths = [corpus_path] if corpus_path else (cfg.corpus_paths or [run.path("corpus")])
    corpus = [e for p in paths for e in read_corpus(_require(p, "corpus"))]
    corpus = [e for e in corpus if e.language in cfg.languages]

    requests = plan_batch(corpus, cfg.quotas, cfg.seed)
    gen_dir = run.path("generations")
    write_jsonl(os.path.join(gen_dir, "plan.jsonl"), (r.model_dump(mode="json", exclude={"prompt_text"}) for r in requests))

    chosen = [r for r in requests if r.target_role == "chosen-generator"]
    rejected = [r for r in requests if r.target_role == "rejected-generator"]
    if run.dry_run:
        for r in requests:
            click.echo(f"{r.request_id}\t{r.language}\t{r.task}\t{(r.kind or r.combo).value}\t{r.target_role}")
        click.echo(f"✅ Dry run: {len(requests)} requests planned, no backend called", err=True)
        return

    failed = 0
    for role, batch in (("chosen-generator", chosen), ("rejected-generator", rejected)):
        if not batch:
            continue
        spec = cfg.backend(role)
        records = run_batch(batch, spec, os.path.join(gen_dir, f"{role}.jsonl"), progress=run.progress, seed=cfg.seed)
        failed += sum(1 for r in records if r.status != "ok")
    click.echo(f"✅ {len(requests) - failed}/{len(requests)} generations ok ({gen_dir})", err=True)
    if failed:
        click.echo(f"⚠️  {failed} requests failed; re-run to retry them", err=True)


# ---------------------------------------------------------------------------
# build-dataset
# ---------------------------------------------------------------------------


def _records(path: str) -> List[GenerationRecord]:
    return load_records(path) if os.path.exists(path) else []


@cli.command("build-dataset")
@click.option("--keep-list", type=click.Path(exists=True, dir_okay=False), default=None, help="Keep only these training dialogues.")
@click.option("--split-by-language", is_flag=True, help="Write one file per language.")
@click.pass_obj
@exits_on_error
def build_dataset(run: RunContext, keep_list, split_by_language):
    """Assemble SFT and DPO datasets from the generation logs."""
    cfg = run.config
    gen_dir = run.path("generations")
    chosen = _records(os.path.join(gen_dir, "chosen-generator.jsonl"))
    rejected = _records(os.path.join(gen_dir, "rejected-generator.jsonl"))
    if not chosen and not rejected:
        raise DataError(f"no generation logs under {gen_dir}")

    sft = ds.build_sft(
        [r for r in chosen if r.request and r.request.task == "sft"],
        cfg.split.model_copy(update={"seed": cfg.seed}),
        cfg.system_preamble,
        keep_list=read_keep_list(keep_list) if keep_list else None,
    )
    if keep_list:
        click.echo(f"ℹ️  keep-list dropped {sft.dropped_by_keep_list} training dialogues", err=True)
    dpo = ds.build_dpo(
        [r for r in chosen if r.request and r.request.task == "dpo"],
        [r for r in rejected if r.request and r.request.task == "dpo"],
    )

    out = run.path("dataset")
    written = []
    written += [("sft-chat", p) for p in ds.emit(sft.train, "sft-chat", os.path.join(out, "sft_train.jsonl"), split_by_language)]
    written += [("sft-chat", p) for p in ds.emit(sft.test, "sft-chat", os.path.join(out, "sft_test.jsonl"), split_by_language)]
    written += [("dpo-pairs", p) for p in ds.emit(dpo.pairs, "dpo-pairs", os.path.join(out, "dpo_pairs.jsonl"), split_by_language)]
    write_jsonl(os.path.join(out, "test_items.jsonl"), ds.test_items(sft.test))
    write_json(os.path.join(out, "dpo_report.json"), {
        "unmatched": [u.model_dump() for u in dpo.unmatched],
        "quarantined": [q.model_dump() for q in dpo.quarantined],
    })
    stats = ds.dataset_stats(sft, dpo)
    write_json(os.path.join(out, "dataset_stats.json"), stats)

    violations = [(p, line, msg) for fmt, p in written for line, msg in ds.validate_file(p, fmt)]
    for p, line, msg in violations[:20]:
        click.echo(f"❌ {p}:{line}: {msg}", err=True)
    if violations:
        raise DataError(f"{len(violations)} schema violations in emitted datasets")

    click.echo(f"✅ SFT {len(sft.train)} train / {len(sft.test)} test, DPO {len(dpo.pairs)} pairs ({out})", err=True)
    if dpo.unmatched or dpo.quarantined:
        click.echo(f"⚠️  {len(dpo.unmatched)} unmatched, {len(dpo.quarantined)} quarantined (see dpo_report.json)", err=True)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--predictions", type=click.Path(dir_okay=False), required=True, help="JSON lines {id, prediction}.")
@click.option("--references", type=click.Path(dir_okay=False), default=None, help="Test items (default: dataset/test_items.jsonl).")
@click.option("--extra-scores", type=click.Path(exists=True, dir_okay=False), multiple=True, help="Per-item scores from other tools, merged by id.")
@click.pass_obj
@exits_on_error
def evaluate(run: RunContext, predictions, references, extra_scores):
    """chrF++ and ROUGE-L against the test references."""
    cfg = run.config
    references = references or run.path("dataset", "test_items.jsonl")
    frame = score_predictions(_require(predictions, "predictions"), _require(references, "references"), cfg.chrf)
    if frame.empty:
        raise MetricInputError("no predictions to score")
    frame = merge_scores(frame, extra_scores)
    summary = summarize_scores(frame)

    out = run.path("eval")
    write_jsonl(os.path.join(out, "scores.jsonl"), json.loads(frame.to_json(orient="records")))
    hyps = {str(r["id"]): r.get("prediction", "") for r in read_jsonl(predictions)}
    refs = {str(r["id"]): r["reference"] for r in read_jsonl(references)}
    ids = list(frame["id"])
    payload = {
        "per_language": frame_to_json(summary, ndigits=4),
        "corpus_chrf_pp": round(chrf_corpus([hyps[i] for i in ids], [refs[i] for i in ids], cfg.chrf), 4),
        "items": len(frame),
        "metrics": metric_columns(frame),
    }
    text = render(summary, decimals=3)
    _write_report(os.path.join(out, "report"), payload, text)
    click.echo(text)
    click.echo(f"✅ Scored {len(frame)} predictions ({out})", err=True)


# ---------------------------------------------------------------------------
# judge
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--predictions", type=click.Path(dir_okay=False), default=None, help="Judge these predictions against the test questions.")
@click.option("--items", "items_path", type=click.Path(dir_okay=False), default=None, help="Test items (default: dataset/test_items.jsonl).")
@click.option("--dialogues", type=click.Path(dir_okay=False), default=None, help="Judge SFT dialogues instead (default: dataset/sft_test.jsonl).")
@click.option("--flatten", type=click.Choice(["final_turn", "dialogue"]), default=None, help="What the judge sees of a dialogue.")
@click.option("--group-by", type=click.Choice(["language", "kind", "both"]), default="language", show_default=True)
@click.option("--backend", "provider", type=click.Choice(PROVIDERS), default=None)
@click.option("--agreement-with", type=click.Path(exists=True, dir_okay=False), default=None, help="Second verdict log; report weighted kappa per criterion.")
@click.pass_obj
@exits_on_error
def judge(run: RunContext, predictions, items_path, dialogues, flatten, group_by, provider, agreement_with):
    """Score answers with the rubric judge and aggregate per group."""
    cfg = run.config
    if provider:
        cfg = cfg.use_provider(provider)
    if predictions:
        items = items_from_predictions(_require(items_path or run.path("dataset", "test_items.jsonl"), "test items"), _require(predictions, "predictions"))
    else:
        path = _require(dialogues or run.path("dataset", "sft_test.jsonl"), "dialogues")
        items = items_from_dialogues(ds.read_dataset(path, "sft-chat"), flatten or cfg.judge_flatten)
    if not items:
        raise DataError("nothing to judge")

    out = run.path("judge")
    if run.dry_run:
        click.echo(f"✅ Dry run: {len(items)} items would be judged by '{cfg.backend('judge').name}'", err=True)
        return

    results = judge_batch(items, cfg.backend("judge"), os.path.join(out, "checkpoint.jsonl"), progress=run.progress, seed=cfg.seed)
    write_jsonl(os.path.join(out, "verdicts.jsonl"), (result_row(r) for r in results))
    table = aggregate_verdicts(results, group_by=group_by)
    write_json(os.path.join(out, "criteria.json"), table.to_dict())
    table.to_csv(os.path.join(out, "criteria.csv"))
    click.echo(table.render())

    if agreement_with:
        other = {r.item_id: r.verdict for r in read_results(agreement_with) if r.verdict is not None}
        mine = {r.item_id: r.verdict for r in results if r.verdict is not None}
        shared = sorted(set(other) & set(mine))
        if not shared:
            raise DataError(f"{agreement_with} shares no judged items with this run")
        kappas = {
            c: weighted_kappa([verdict_scores(mine[i])[c] for i in shared], [verdict_scores(other[i])[c] for i in shared], cfg.kappa_weighting)
            for c in CRITERIA
        }
        write_json(os.path.join(out, "agreement.json"), {"items": len(shared), "weighting": cfg.kappa_weighting, "kappa": kappas})
        for c, k in kappas.items():
            click.echo(f"κ {c}: {k:.3f}")

    failed = sum(1 for r in results if r.status != "ok")
    click.echo(f"✅ {len(results) - failed}/{len(results)} verdicts parsed ({out})", err=True)
    if failed:
        click.echo(f"⚠️  {failed} items without a valid verdict", err=True)


# ---------------------------------------------------------------------------
# influence
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--train-grads", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--val-grads", type=click.Path(exists=True, dir_okay=False), default=None, help="Required for binary --train-grads; otherwise defaults to the validation records of the JSON-lines file.")
@click.option("--keep", type=float, default=None, help="Retention fraction in (0, 1]; overrides the config.")
@click.pass_obj
@exits_on_error
def influence(run: RunContext, train_grads, val_grads, keep):
    """Rank training samples by mean gradient influence and write a keep-list."""
    cfg = run.config
    fraction = keep if keep is not None else cfg.retention_fraction
    train = read_gradients(train_grads, split=None if val_grads else "train")
    validation = read_gradients(val_grads or train_grads, split="validation")

    report = mean_influence(train, validation)
    kept = filter_top(report, fraction)

    out = run.path("influence")
    write_json(os.path.join(out, "report.json"), report.model_dump(mode="json"))
    write_keep_list(os.path.join(out, "keep_list.txt"), kept)
    s = report.summary
    if s:
        click.echo(f"mean influence: min {s.min:.4g}  median {s.median:.4g}  mean {s.mean:.4g}  max {s.max:.4g}")
    click.echo(f"harmful (negative mean influence): {report.harmful_count}")
    click.echo(f"✅ Kept {len(kept)}/{len(report.scores)} samples ({os.path.join(out, 'keep_list.txt')})", err=True)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--reference", type=click.Choice(["judge-averages", "inventory"]), default=None, help="Render a shipped reference table.")
@click.option("--criteria", type=click.Path(dir_okay=False), default=None, help="Criterion table from judge (default: judge/criteria.json).")
@click.option("--stats", type=click.Path(dir_okay=False), default=None, help="dataset_stats.json to set beside the inventory.")
@click.pass_obj
@exits_on_error
def report(run: RunContext, reference, criteria, stats):
    """Render benchmark, inventory or judge tables as text and JSON."""
    out = run.path("reports")
    if reference == "judge-averages":
        result = judge_averages_report()
        text = render(result["table"])
        payload = {
            "table": frame_to_json(result["table"]),
            "deviations": result["deviations"],
            "conversion_outliers": result["conversion_outliers"],
        }
        _write_report(os.path.join(out, "judge_averages"), payload, text)
        click.echo(text)
        if result["deviations"]:
            click.echo(f"⚠️  {len(result['deviations'])} averages deviate by more than 0.05", err=True)
        for o in result["conversion_outliers"]:
            click.echo(f"⚠️  suspect cell {o['model']} / {o['criterion']} / {o['language']}", err=True)
        return

    if reference == "inventory":
        observed = None
        stats_path = stats or run.path("dataset", "dataset_stats.json")
        if stats or os.path.exists(stats_path):
            with open(_require(stats_path, "dataset stats"), "r", encoding="utf-8") as f:
                observed = json.load(f).get("per_language")
        result = inventory_report(observed)
        text = render(result["table"], decimals=2)
        payload = {"table": frame_to_json(result["table"]), "implied": result["implied"], "totals": result["totals"]}
        _write_report(os.path.join(out, "inventory"), payload, text)
        click.echo(text)
        for item in result["implied"]:
            click.echo(f"⚠️  {item['language']} {item['column']}: published {item['published']}, total implies {item['implied_by_total']}", err=True)
        return

    table = criterion_table_report(_require(criteria or run.path("judge", "criteria.json"), "criterion table"))
    text = table.render()
    _write_report(os.path.join(out, "criteria"), table.to_dict(), text)
    click.echo(text)


if __name__ == "__main__":
    cli()
