"""Scan reports: JSON report, injection records, label counts."""

import csv
import io
import json
from importlib import resources

import jsonschema

from . import FORMATS, __version__
from .faultsim import classify
from .timing import StopModel, hit_probability, windows


def load_schema():
    return json.loads(resources.files("retflip").joinpath("report.schema.json").read_text())


def validate_report(report):
    jsonschema.validate(report, load_schema())
    counts = {}
    for g in report["gadgets"]:
        counts[g["label"]] = counts.get(g["label"], 0) + 1
    if counts != report["counts"]["labels"]:
        raise jsonschema.ValidationError("per-label counts disagree with gadget records")


def _result_fields(res):
    return res.termination.kind, res.termination.code


def timing_record(program, input, settings, addr_src, model):
    """Attack windows of ``addr_src`` and the chance a stop lands in one.

    ``hit_probability`` uses the model as given; ``aimed_hit_probability``
    re-centres it on the midpoint of the longest window, the best a sweep
    can aim for.
    """
    wins = windows(program, input, settings.seed, settings.budget, addr_src,
                   settings.degradation)
    aimed = 0.0
    if wins:
        w = max(wins, key=lambda w: (w.length, -w.start_tick))
        aimed = hit_probability(wins, StopModel((w.start_tick + w.end_tick) / 2, model.stddev))
    return {
        "addr_src": f"{addr_src:#x}",
        "windows": [{"slot": f"{w.slot_addr:#x}", "start": w.start_tick, "end": w.end_tick}
                    for w in wins],
        "total_window": sum(w.length for w in wins),
        "stop_model": {"mean": float(model.mean), "stddev": float(model.stddev)},
        "hit_probability": hit_probability(wins, model),
        "aimed_hit_probability": aimed,
    }


def build_report(result, program, incorrect_input, settings, config_echo, model=None):
    """Assemble the report dict for a ScanResult."""
    layout = result.incorrect_trace.layout
    base = layout.code_base
    first = {}
    for o, lab in zip(result.outcomes, result.labels):
        first.setdefault((o.injection.pair.key, lab), o)
    gadgets = []
    for pair, lab, occ in result.gadgets:
        kind, code = _result_fields(first[(pair.key, lab)].result)
        gadgets.append({
            "addr_src": f"{pair.addr_src:#x}",
            "addr_dest": f"{pair.addr_dest:#x}",
            "mask": f"{pair.mask:#x}",
            "src_offset": f"{pair.addr_src - base:#x}",
            "dest_offset": f"{pair.addr_dest - base:#x}",
            "bit": pair.bit_index,
            "direction": pair.direction,
            "label": lab,
            "occurrences": list(occ),
            "termination": kind,
            "exit_code": code,
            "stdout": first[(pair.key, lab)].result.stdout.hex(),
        })
    timing = []
    if model is not None:
        for src in sorted({p.addr_src for p, _, _ in result.gadgets}):
            timing.append(timing_record(program, incorrect_input, settings, src, model))
    base_res = result.incorrect_trace.result
    kind, code = _result_fields(base_res)
    return {
        "format": FORMATS["report"],
        "tool": "retflip",
        "version": __version__,
        "config": config_echo,
        "layout": {"seed": layout.aslr_seed, "code_base": f"{layout.code_base:#x}",
                   "stack_base": f"{layout.stack_base:#x}"},
        "counts": {
            "correct_trace": result.correct_trace.n_instructions,
            "incorrect_trace": result.incorrect_trace.n_instructions,
            "diff": None if result.diff is None else len(result.diff),
            "candidates": len(result.candidates),
            "simulated": len(result.outcomes),
            "labels": result.label_counts(),
        },
        "baseline": {"label": result.baseline_label, "termination": kind, "exit_code": code,
                     "ticks": base_res.ticks, "instructions": base_res.instructions_executed},
        "gadgets": gadgets,
        "timing": timing,
    }


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def outcome_record(outcome, rules):
    inj = outcome.injection
    res = outcome.result
    return {
        "addr_src": f"{inj.pair.addr_src:#x}",
        "addr_dest": f"{inj.pair.addr_dest:#x}",
        "occurrence": inj.occurrence,
        "mode": inj.mode,
        "fired": outcome.fired,
        "diverted": outcome.diverted,
        "termination": res.termination.kind,
        "exit_code": res.termination.code,
        "ticks": res.ticks,
        "instructions": res.instructions_executed,
        "matched_correct_trace": outcome.matched_correct_trace,
        "stdout": res.stdout.hex(),
        "stderr": res.stderr.hex(),
        "label": classify(outcome, rules),
    }


def records_jsonl(outcomes, rules):
    return "".join(json.dumps(outcome_record(o, rules), sort_keys=True) + "\n"
                   for o in outcomes)


def label_counts_csv(counts):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "count"])
    for lab in sorted(counts):
        w.writerow([lab, counts[lab]])
    return buf.getvalue()
