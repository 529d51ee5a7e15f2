"""Итоговый отчёт report.md по манифесту запуска."""
import logging
import os
from typing import List, Optional

import pandas as pd

from pipeline.stages import RunManifest
from utils.config_utils import STAGES
from utils.utils import read_json, tr

logger = logging.getLogger(__name__)

REPORT_FILE = 'report.md'
MODELS = (('teacher', 'Teacher'), ('bdld', 'BDLD'), ('bdl', 'BDL'))
ABSENT = '_absent_'


def _fmt(value: Optional[float]) -> str:
    return 'n/a' if value is None else f"{value:.4f}"


def _interval(values) -> str:
    return 'n/a' if not values else f"[{values[0]:.4f}, {values[1]:.4f}]"


def _evaluation_section(manifest: RunManifest) -> List[str]:
    lines = ['## Evaluation (validation split)', '']
    if not manifest.outputs_intact('evaluate'):
        return lines + [ABSENT, '']
    metrics = read_json(manifest.absolute('evaluate/metrics.json'))
    lines.append(f"Patients: {metrics.get('n_validation')}, prevalence: {_fmt(metrics.get('prevalence'))}")
    lines.append('')
    lines.append('| model | AUROC (mean30) | AUPRC (mean30) | AUROC (ci30) | AUROC 95% CI | AUPRC (ci30) | AUPRC 95% CI |')
    lines.append('|---|---|---|---|---|---|---|')
    for key, name in MODELS:
        row = metrics.get(key)
        if row is None:
            continue
        mean, ci = row['mean30'], row['ci30']
        lines.append(f"| {name} | {_fmt(mean['auroc'])} | {_fmt(mean['auprc'])} | {_fmt(ci['auroc'])} | "
                     f"{_interval(ci['auroc_ci'])} | {_fmt(ci['auprc'])} | {_interval(ci['auprc_ci'])} |")
    lines.append('')

    summary_path = manifest.absolute('evaluate/latent_summary.json')
    if os.path.exists(summary_path):
        lines += ['### Latent variables (BDLD)', '', '| label | latent | min | p5 | p50 | p95 | max |', '|---|---|---|---|---|---|---|']
        for label, per_label in sorted(read_json(summary_path).items()):
            for latent, stats in sorted(per_label.items()):
                lines.append(f"| {label} | {latent} | {_fmt(stats['min'])} | {_fmt(stats['p5'])} | {_fmt(stats['p50'])} | "
                             f"{_fmt(stats['p95'])} | {_fmt(stats['max'])} |")
        lines.append('')
    return lines


def _association_section(manifest: RunManifest) -> List[str]:
    lines = ['## Association map', '']
    if not manifest.outputs_intact('associate'):
        return lines + [ABSENT, '']
    frame = pd.read_csv(manifest.absolute('associate/association.csv'), keep_default_na=False)
    counts = frame['quadrant'].value_counts()
    lines += ['| quadrant | codes |', '|---|---|']
    for quadrant in ('associated', 'dissociated', 'ambiguous_high_context', 'ambiguous_high_coef', 'undetermined'):
        lines.append(f"| {quadrant} | {int(counts.get(quadrant, 0))} |")
    lines.append('')
    collinearity_path = manifest.absolute('associate/collinearity.csv')
    if os.path.exists(collinearity_path):
        pairs = pd.read_csv(collinearity_path)
        lines.append(f"Collinear code pairs (Cramér's V above threshold): {len(pairs)}")
        lines.append('')
    lines.append('Files:')
    lines += [f"- {path}" for path in manifest.outputs('associate')]
    lines.append('')
    return lines


def _explanation_section(manifest: RunManifest) -> List[str]:
    lines = ['## Patient explanations', '']
    if not manifest.outputs_intact('explain'):
        return lines + [ABSENT, '']
    rows = read_json(manifest.absolute('explain/summary.json'))['patients']
    if rows:
        gaps = [abs(r['p_full_mean'] - r['p_selected_mean']) for r in rows]
        fractions = [r['fraction_selected'] for r in rows]
        lines.append(f"Patients: {len(rows)}, mean |p_full - p_selected|: {_fmt(sum(gaps) / len(gaps))}, "
                     f"mean fraction selected: {_fmt(sum(fractions) / len(fractions))}")
        lines.append('')
    lines.append('Files:')
    lines += [f"- {path}" for path in manifest.outputs('explain') if path.endswith('.csv')]
    lines.append('')
    return lines


def _stage_section(manifest: RunManifest) -> List[str]:
    lines = ['## Stages', '', '| stage | status | config hash | seed |', '|---|---|---|---|']
    for stage in STAGES:
        entry = manifest.stages.get(stage)
        if entry is None:
            lines.append(f"| {stage} | absent | | |")
            continue
        status = 'complete' if manifest.outputs_intact(stage) else 'stale'
        lines.append(f"| {stage} | {status} | {entry['config_hash'][:12]} | {entry['seed']} |")
    lines.append('')
    return lines


def write_report(manifest: RunManifest, output_dir: Optional[str] = None) -> str:
    """
    Собирает report.md. Результат побайтно определяется манифестом и файлами стадий.

    :return: Путь к отчёту.
    """
    output_dir = output_dir or manifest.output_dir
    lines = ['# riskdistill run report', '']
    lines += _stage_section(manifest)
    lines += _evaluation_section(manifest)
    lines += _association_section(manifest)
    lines += _explanation_section(manifest)
    path = os.path.join(output_dir, REPORT_FILE)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines).rstrip('\n') + '\n')
    logger.info(tr("Отчёт записан: {path}").format(path=path))
    return path
