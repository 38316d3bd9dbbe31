"""Plain-dict helpers for writing run artifacts as JSON and CSV rows."""
import enum
import math
from dataclasses import asdict

import numpy as np

from .bench import WelfareReport


def to_plain(value):
    """Recursively convert numpy, enum and non-finite values into JSON-safe Python."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.generic):
        return to_plain(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, enum.Enum):
        return value.value
    return value


def welfare_report_to_dict(report):
    return to_plain(asdict(report))


def welfare_report_from_dict(data):
    fields = WelfareReport.__dataclass_fields__
    return WelfareReport(**{key: value for key, value in data.items() if key in fields})


def report_row(report, variant):
    """One aggregate-CSV row: headline figures plus the phase splits."""
    coarsening = report.per_phase.get('coarsening', {})
    run = report.per_phase.get('run', {})
    series = report.correct_classification
    return {
        'variant': variant,
        'replication': report.replication,
        'estimator': report.estimator,
        'n_periods': report.n_periods,
        'empirical_welfare': report.empirical_welfare,
        'policy_welfare': report.policy_welfare,
        'average_welfare': report.average_welfare,
        'empirical_regret': report.empirical_regret,
        'regret': report.regret,
        'regret_standard_error': report.regret_standard_error,
        'phase_boundary': report.phase_boundary,
        'coarsening_welfare': coarsening.get('empirical_welfare'),
        'run_welfare': run.get('empirical_welfare'),
        'coarsening_regret': coarsening.get('empirical_regret'),
        'run_regret': run.get('empirical_regret'),
        'terminal_classification': series[-1] if series else None,
    }


def classification_rows(report, variant):
    if not report.correct_classification:
        return []
    return [
        {
            'variant': variant,
            'estimator': report.estimator,
            'replication': report.replication,
            'period': period,
            'probability': probability,
        }
        for period, probability in enumerate(report.correct_classification, start=1)
    ]


def tuning_to_dict(params):
    return to_plain(asdict(params))


def phase_plan_to_dict(plan):
    return {
        'tau_raw': plan.tau_raw,
        'tau_ceil': plan.tau_ceil,
        'run_length': plan.run_length,
        'T': plan.T,
        'delta': plan.delta,
        'log_arg': plan.log_arg.value,
        'complexity': type(plan.complexity).__name__,
        'complexity_value': to_plain(next(iter(asdict(plan.complexity).values()))),
    }
