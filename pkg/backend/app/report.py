"""Human-readable and JSON reports: benchmark tables, language inventory, criterion tables."""

import json
import logging
import os
from typing import Dict, List, Optional

import pandas as pd

from app.ingest import REFERENCE_DIR, load_language_inventory
from app.metrics import AVG_COLUMN, CriterionTable, aggregate_criteria, rating_to_percent

logger = logging.getLogger(__name__)

AVERAGE_TOLERANCE = 0.05
# published overall averages come from unrounded per-language values
OVERALL_TOLERANCE = 0.1
CONVERSION_TOLERANCE = 0.1
# float noise on cells that sit exactly at the tolerance
_EPS = 1e-9

INVENTORY_COLUMNS = ["dictionary_entries", "sft_dialogues", "dpo_pairs", "test_items"]


def load_reference(name: str) -> pd.DataFrame:
    return pd.read_csv(os.path.join(REFERENCE_DIR, name), keep_default_na=False)


def render(frame: pd.DataFrame, decimals: int = 1) -> str:
    return frame.to_string(float_format=lambda v: f"{v:.{decimals}f}")


# ===========================================================================
# JUDGE BENCHMARK TABLE
# ===========================================================================


def reference_criterion_tables() -> Dict[str, CriterionTable]:
    """Shipped per-criterion percentages, one table per model."""
    pct = load_reference("judge_percentages.csv")
    return {model: CriterionTable.from_long(rows) for model, rows in pct.groupby("model", sort=False)}


def conversion_outliers(tolerance: float = CONVERSION_TOLERANCE) -> List[dict]:
    """Cells whose shipped percentage disagrees with the converted shipped mean rating."""
    merged = load_reference("judge_ratings.csv").merge(
        load_reference("judge_percentages.csv"), on=["model", "criterion", "language"]
    )
    out = []
    for row in merged.itertuples(index=False):
        converted = rating_to_percent(float(row.rating))
        if abs(converted - float(row.percent)) > tolerance + _EPS:
            out.append({
                "model": row.model,
                "criterion": row.criterion,
                "language": row.language,
                "rating": float(row.rating),
                "converted": round(converted, 2),
                "published": float(row.percent),
            })
    return out


def judge_averages_report() -> dict:
    """Recompute the per-language judge averages from the criterion percentages."""
    published = load_reference("judge_averages.csv")
    published_lookup = {(r.model, r.language): float(r.average) for r in published.itertuples(index=False)}

    rows, deviations = {}, []
    for model, table in reference_criterion_tables().items():
        averages = aggregate_criteria(table).to_series()
        rows[model] = averages
        for language, value in averages.items():
            ref = published_lookup.get((model, language))
            if ref is None:
                continue
            tolerance = OVERALL_TOLERANCE if language == AVG_COLUMN else AVERAGE_TOLERANCE
            if abs(value - ref) > tolerance + _EPS:
                deviations.append({"model": model, "language": language, "published": ref, "recomputed": round(value, 3)})

    frame = pd.DataFrame(rows).T
    languages = [c for c in frame.columns if c != AVG_COLUMN]
    frame = frame[languages + [AVG_COLUMN]]
    frame.index.name = "model"

    outliers = conversion_outliers()
    for o in outliers:
        logger.warning(
            "Suspect reference cell %s / %s / %s: rating %.2f converts to %.2f, published %.1f",
            o["model"], o["criterion"], o["language"], o["rating"], o["converted"], o["published"],
        )
    for d in deviations:
        logger.warning("Average %s / %s deviates: published %.2f, recomputed %.3f", d["model"], d["language"], d["published"], d["recomputed"])
    return {"table": frame, "deviations": deviations, "conversion_outliers": outliers}


# ===========================================================================
# LANGUAGE INVENTORY
# ===========================================================================


def inventory_report(observed: Optional[Dict[str, Dict[str, int]]] = None) -> dict:
    """Reference inventory with totals, implied values for suspect cells and observed counts."""
    inv = load_language_inventory().copy()
    with open(os.path.join(REFERENCE_DIR, "inventory_totals.json"), "r", encoding="utf-8") as f:
        totals = json.load(f)

    for col in INVENTORY_COLUMNS:
        inv[col] = pd.to_numeric(inv[col])

    implied = []
    for code, row in inv.iterrows():
        for col in filter(None, row["suspect_columns"].split(";")):
            others = inv.drop(index=code)[col].sum()
            value = int(totals[col] - others)
            implied.append({"language": code, "column": col, "published": float(row[col]), "implied_by_total": value})
            logger.warning("%s %s is published as %s; the total implies %d", code, col, row[col], value)

    total_check = []
    for col in INVENTORY_COLUMNS:
        fixed = inv[col].copy()
        for item in implied:
            if item["column"] == col:
                fixed[item["language"]] = item["implied_by_total"]
        total_check.append({"column": col, "published_total": int(totals[col]), "sum": int(round(fixed.sum()))})

    table = inv[["name", "script", "family", *INVENTORY_COLUMNS]].copy()
    if observed:
        table["observed_sft_train"] = [observed.get(c, {}).get("sft_train", 0) for c in table.index]
        table["observed_sft_test"] = [observed.get(c, {}).get("sft_test", 0) for c in table.index]
        table["observed_dpo_pairs"] = [observed.get(c, {}).get("dpo_pairs", 0) for c in table.index]
    return {"table": table, "implied": implied, "totals": total_check}


# ===========================================================================
# OUTPUT
# ===========================================================================


def frame_to_json(frame: pd.DataFrame, ndigits: int = 2) -> dict:
    out = {}
    for idx, row in frame.iterrows():
        out[str(idx)] = {str(k): (round(float(v), ndigits) if pd.api.types.is_number(v) and not isinstance(v, bool) else v) for k, v in row.items()}
    return out


def criterion_table_report(path: str) -> CriterionTable:
    with open(path, "r", encoding="utf-8") as f:
        return CriterionTable.from_dict(json.load(f))