"""Pipeline entry point: one subcommand per stage, one YAML config.

Stages read only prior-stage artifacts from the working directory, so any
stage can be re-run in isolation; a missing upstream artifact exits with
status 2 naming the file, a config problem exits 1 with the field path.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import corpus as corpus_mod
from . import datasets as datasets_mod
from . import evaluation as eval_mod
from . import ingest as ingest_mod
from . import qa_gen as qa_mod
from . import qc as qc_mod
from . import retrieval as retrieval_mod
from . import service as service_mod
from .config import ConfigError, PipelineConfig, load_config
from .gateway import ChatClient, EmbeddingClient, MockEmbeddingBackend


def _fail(message: str, code: int) -> None:
    click.echo(message, err=True)
    sys.exit(code)


def _load(config_path: str | None, **overrides) -> PipelineConfig:
    try:
        return load_config(config_path, overrides=overrides)
    except ConfigError as exc:
        _fail(f"config error: {exc}", 1)


def _require(path: Path) -> Path:
    if not path.exists():
        _fail(f"missing upstream artifact: {path}", 2)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _tags(config: PipelineConfig) -> bool:
    return config.endpoints["generator"].prompt_style != "chat"


def _oracle_map(config: PipelineConfig) -> dict[str, str]:
    """Question -> golden document text, from whichever QA artifacts exist.
    Mock-only convenience so retrieval is exact in offline runs."""
    workdir = config.workdir_path
    oracle: dict[str, str] = {}
    for name in ("attackqa.jsonl", "attackqa_raw.jsonl", "train.jsonl", "eval.jsonl"):
        path = workdir / name
        if path.exists():
            for pair in qa_mod.read_pairs(path):
                oracle.setdefault(pair.question, pair.document)
            if name == "attackqa.jsonl":
                break
    return oracle


def _embedder(config: PipelineConfig) -> EmbeddingClient:
    cfg = config.endpoints["embedder"]
    if cfg.is_mock and cfg.mock_oracle:
        backend = MockEmbeddingBackend(cfg.dimension, oracle=_oracle_map(config))
        return EmbeddingClient(cfg, backend=backend)
    return EmbeddingClient(cfg)


def _chat(config: PipelineConfig, role: str) -> ChatClient:
    return ChatClient(config.endpoints[role])


def common_options(fn):
    fn = click.option("--config", "config_path", default=None, help="YAML pipeline config file")(fn)
    fn = click.option("--workdir", default=None, help="working directory for stage artifacts")(fn)
    fn = click.option("--seed", "split_seed", type=int, default=None, help="pipeline random seed")(fn)
    return fn


@click.group()
def main() -> None:
    """Build, quality-control, and evaluate an ATT&CK Q&A pipeline."""


@main.command()
@common_options
@click.option("--bundle", default=None, help="STIX bundle path (overrides config)")
def ingest(config_path, workdir, split_seed, bundle) -> None:
    """Parse the source data into entity and relationship tables."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed, bundle=bundle)
    workdir_path = config.workdir_path
    workdir_path.mkdir(parents=True, exist_ok=True)
    if config.bundle:
        kb = ingest_mod.parse_bundle_file(_require(Path(config.bundle)))
    elif config.tables:
        kb = ingest_mod.load_tables(_require(Path(config.tables)))
    else:
        _fail("config error: bundle: no input configured (set bundle or tables)", 1)
    ingest_mod.export_tables(kb, workdir_path / "tables")
    report = ingest_mod.validate(kb)
    _write_json(
        workdir_path / "ingest_report.json",
        {
            "counts": kb.counts(),
            "version": kb.version,
            "unresolved_endpoints": kb.unresolved_endpoints,
            "excluded_deprecated": kb.excluded_deprecated,
            "skipped_object_types": kb.skipped_object_types,
            "validation_findings": [
                {"kind": f.kind, "message": f.message, "subject": f.subject}
                for f in report.findings
            ],
        },
    )
    click.echo(f"ingested: {kb.counts()}")


@main.command("build-corpus")
@common_options
def build_corpus(config_path, workdir, split_seed) -> None:
    """Build the retrieval corpus from the ingested tables."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    kb = ingest_mod.load_tables(_require(workdir_path / "tables"))
    docs, report = corpus_mod.build_corpus(kb)
    corpus_mod.write_corpus(workdir_path / "corpus.jsonl", docs)
    stats = corpus_mod.corpus_stats(docs)
    _write_json(
        workdir_path / "corpus_report.json",
        {
            "documents": report.description_docs + report.relation_docs + report.summary_docs,
            "description_docs": report.description_docs,
            "relation_docs": report.relation_docs,
            "summary_docs": report.summary_docs,
            "skipped_empty": report.skipped_empty,
            "skipped_unresolved_subject": report.skipped_unresolved_subject,
            "stats": {
                "doc_count": stats.doc_count,
                "max_tokens": stats.max_tokens,
                "min_tokens": stats.min_tokens,
                "mean_tokens": stats.mean_tokens,
                "tokenizer": stats.tokenizer,
            },
        },
    )
    click.echo(f"corpus: {stats.doc_count} documents")


@main.command("gen-qa")
@common_options
def gen_qa(config_path, workdir, split_seed) -> None:
    """Generate raw Q&A pairs from the corpus."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    docs = corpus_mod.read_corpus(_require(workdir_path / "corpus.jsonl"))
    generator = _chat(config, "generator")
    pairs, report = qa_mod.generate_dataset(docs, generator, tags=_tags(config))
    qa_mod.write_pairs(workdir_path / "attackqa_raw.jsonl", pairs)
    _write_json(workdir_path / "generation_report.json", report.to_dict())
    click.echo(f"generated {len(pairs)} pairs ({report.parse_failures} parse failures)")


@main.command("qc")
@common_options
def qc(config_path, workdir, split_seed) -> None:
    """Quality-control the raw pairs: grounding, dedup, grading, filtering."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    pairs = qa_mod.read_pairs(_require(workdir_path / "attackqa_raw.jsonl"))
    grader = _chat(config, "grader")
    retained, report = qc_mod.run_qc(pairs, grader, threshold=config.qc_threshold)
    qa_mod.write_pairs(workdir_path / "attackqa.jsonl", retained)
    _write_json(workdir_path / "qc_report.json", report.to_dict())
    summary = datasets_mod.dataset_summary(retained)
    _write_json(workdir_path / "dataset_summary.json", summary.to_dict())
    click.echo(f"retained {report.retained} of {report.input_pairs} pairs")


@main.command("split")
@common_options
def split(config_path, workdir, split_seed) -> None:
    """Split the dataset into train/eval with all documents kept in train."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    pairs = qa_mod.read_pairs(_require(workdir_path / "attackqa.jsonl"))
    try:
        result = datasets_mod.split_train_eval(pairs, config.split_seed, config.eval_fraction)
    except ValueError as exc:
        _fail(str(exc), 1)
    meta = {
        "seed": result.seed,
        "eval_fraction": config.eval_fraction,
        "validation_fraction_of_train": result.validation_fraction_of_train,
        "swaps": result.swaps,
        "conflicts": result.conflicts,
    }
    qa_mod.write_pairs(workdir_path / "train.jsonl", result.train, meta=meta)
    qa_mod.write_pairs(workdir_path / "eval.jsonl", result.eval, meta=meta)
    click.echo(f"split: {len(result.train)} train / {len(result.eval)} eval")


@main.command("index")
@common_options
def index(config_path, workdir, split_seed) -> None:
    """Embed the corpus and persist the vector index."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    docs = corpus_mod.read_corpus(_require(workdir_path / "corpus.jsonl"))
    vector_index = retrieval_mod.build_index(docs, _embedder(config))
    retrieval_mod.save_index(vector_index, workdir_path / "index")
    click.echo(f"indexed {len(vector_index)} documents (dim {vector_index.dimension})")


@main.command("build-emb-data")
@common_options
def build_emb_data(config_path, workdir, split_seed) -> None:
    """Build the contrastive embedding fine-tune dataset."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    train = qa_mod.read_pairs(_require(workdir_path / "train.jsonl"))
    docs = corpus_mod.read_corpus(_require(workdir_path / "corpus.jsonl"))
    kb = ingest_mod.load_tables(_require(workdir_path / "tables"))
    rows, report = datasets_mod.build_embedding_dataset(
        train, docs, kb, n_neg=config.n_neg, seed=config.split_seed
    )
    datasets_mod.write_rows(
        workdir_path / "embedding_tune.jsonl",
        rows,
        meta={"seed": config.split_seed, "n_neg": config.n_neg},
    )
    click.echo(
        f"embedding dataset: {report.rows} rows"
        f" ({report.short_pools} short pools, {report.empty_pools} empty pools)"
    )


@main.command("build-gen-data")
@common_options
@click.option("--k", type=int, default=None, help="documents per prompt")
def build_gen_data(config_path, workdir, split_seed, k) -> None:
    """Build the generation fine-tune dataset plus refusal augmentation."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed, k=k)
    workdir_path = config.workdir_path
    train = qa_mod.read_pairs(_require(workdir_path / "train.jsonl"))
    _require(workdir_path / "index" / "manifest.json")
    vector_index = retrieval_mod.load_index(workdir_path / "index")
    embedder = _embedder(config)
    tags = _tags(config)
    rows, gen_report = datasets_mod.build_generation_dataset(
        train, vector_index, embedder, k=config.k, seed=config.split_seed, tags=tags
    )
    refusals, refusal_report = datasets_mod.build_refusal_examples(
        train,
        vector_index,
        embedder,
        k=config.k,
        base_count=len(rows),
        target_ratio=config.refusal_ratio,
        seed=config.split_seed,
        tags=tags,
    )
    datasets_mod.write_rows(
        workdir_path / "generation_tune.jsonl",
        rows + refusals,
        meta={
            "seed": config.split_seed,
            "k": config.k,
            "refusal_ratio": config.refusal_ratio,
            "base_rows": gen_report.rows,
            "refusal_rows": refusal_report.rows,
            "refusal_target": refusal_report.target,
            "golden_injected": gen_report.golden_injected,
            "skipped": gen_report.skipped,
        },
    )
    click.echo(
        f"generation dataset: {gen_report.rows} rows + {refusal_report.rows} refusal rows"
    )


@main.command("serve")
@common_options
@click.option("--port", type=int, default=None, help="HTTP port")
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(config_path, workdir, split_seed, port, host) -> None:
    """Serve the retrieval-augmented Q&A HTTP API."""
    import uvicorn

    config = _load(config_path, workdir=workdir, split_seed=split_seed)
    workdir_path = config.workdir_path
    _require(workdir_path / "index" / "manifest.json")
    vector_index = retrieval_mod.load_index(workdir_path / "index")
    app = service_mod.create_app(
        vector_index,
        _chat(config, "generator"),
        _embedder(config),
        k_default=config.k,
        token=config.serve_token or None,
        log_path=workdir_path / "interactions.jsonl",
        tags=_tags(config),
    )
    uvicorn.run(app, host=host, port=port or config.serve_port)


@main.command("eval")
@common_options
@click.option(
    "--k",
    "recall_ks",
    default=None,
    help="comma-separated recall cutoffs, e.g. 1,5,10 (answer-prompt size comes from parameters.k)",
)
def evaluate(config_path, workdir, split_seed, recall_ks) -> None:
    """Evaluate the pipeline on the held-out eval set."""
    config = _load(config_path, workdir=workdir, split_seed=split_seed, recall_ks=recall_ks)
    workdir_path = config.workdir_path
    eval_pairs = qa_mod.read_pairs(_require(workdir_path / "eval.jsonl"))
    _require(workdir_path / "index" / "manifest.json")
    vector_index = retrieval_mod.load_index(workdir_path / "index")
    report, records = eval_mod.run_eval(
        eval_pairs,
        vector_index,
        _embedder(config),
        _chat(config, "generator"),
        _chat(config, "judge"),
        k=config.k,
        recall_ks=config.recall_ks,
        tags=_tags(config),
    )
    eval_mod.write_eval_records(workdir_path / "eval_records.jsonl", records)
    _write_json(workdir_path / "report.json", report.to_dict())
    (workdir_path / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    click.echo(report.to_markdown())


if __name__ == "__main__":
    main()
