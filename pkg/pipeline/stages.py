"""
Стадии конвейера и манифест запуска.

Каждая стадия пишет свои файлы в <output_dir>/<stage>/ и запись в
manifest.json: хэш своей части конфигурации, зерно, хэши входов (выходов
стадий-зависимостей), выходы с SHA-256; время выполнения и отметка времени лежат в разделе timing.
Стадия считается выполненной, только если все её выходы существуют и
совпадают по хэшу с записанными.
"""
import logging
import os
import time
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from analysis.association import age_histograms, association_map, collinearity_audit, export_association
from analysis.explainer import explain_patients, export_explanation
from analysis.latent import export_latents, latent_frame
from analysis.metrics import evaluate_ci_protocol, evaluate_mean_protocol, export_report
from cohort.generator import PatientRecord, generate_cohort, records_in, split_cohort
from cohort.storage import COHORT_FILE, load_cohort, load_truth, load_vocabulary, save_cohort, save_truth, save_vocabulary
from models.student import init_student, load_student, predict_matrix, save_student, train_student
from models.teacher import TeacherVariant, load_teacher, oracle_teacher, save_teacher, teacher_predict_batch, train_reference_teacher
from utils.config_utils import STAGES, RunConfig
from utils.errors import StageDependencyError
from utils.utils import canonical_json, ensure_folder, read_json, rng_for, sha256_file, sha256_text, tr, write_json

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
TIMING_KEY = 'timing'

DEPENDENCIES: Dict[str, tuple] = {
    'generate': (),
    'teach': ('generate',),
    'train-bdl': ('generate',),
    'train-bdld': ('generate', 'teach'),
    'evaluate': ('generate', 'teach', 'train-bdl', 'train-bdld'),
    'associate': ('generate', 'train-bdld'),
    'explain': ('generate', 'train-bdld'),
}

STAGE_SEEDS: Dict[str, Callable[[RunConfig], int]] = {
    'generate': lambda c: c.generator.seed,
    'teach': lambda c: c.teacher.seed,
    'train-bdl': lambda c: c.bdl.seed,
    'train-bdld': lambda c: c.bdld.seed,
    'evaluate': lambda c: c.metrics.seed,
    'associate': lambda c: c.association.seed,
    'explain': lambda c: c.explain.seed,
}


class RunManifest:
    """
    Манифест запуска: стадия -> запись.
    """

    def __init__(self, output_dir: str, stages: Optional[Dict[str, Dict]] = None):
        self.output_dir = output_dir
        self.stages: Dict[str, Dict] = dict(stages or {})
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def path(self) -> str:
        return os.path.join(self.output_dir, MANIFEST_FILE)

    @classmethod
    def load(cls, output_dir: str) -> 'RunManifest':
        path = os.path.join(output_dir, MANIFEST_FILE)
        if not os.path.exists(path):
            return cls(output_dir)
        return cls(output_dir, read_json(path).get('stages', {}))

    def save(self) -> str:
        return write_json(self.path, {'stages': self.stages})

    def absolute(self, relative: str) -> str:
        return os.path.join(self.output_dir, *relative.split('/'))

    def outputs_intact(self, stage: str) -> bool:
        entry = self.stages.get(stage)
        if not entry:
            return False
        for relative, digest in entry['outputs'].items():
            path = self.absolute(relative)
            if not os.path.isfile(path) or sha256_file(path) != digest:
                return False
        return True

    def input_hashes(self, stage: str) -> Dict[str, str]:
        return {dep: sha256_text(canonical_json(self.stages[dep]['outputs'])) for dep in DEPENDENCIES[stage]}

    def is_current(self, stage: str, config: RunConfig) -> bool:
        """Выходы целы, конфигурация и входы не менялись."""
        entry = self.stages.get(stage)
        if not entry or not self.outputs_intact(stage):
            return False
        return (entry.get('config_hash') == config.stage_hash(stage)
                and entry.get('seed') == STAGE_SEEDS[stage](config)
                and entry.get('inputs') == self.input_hashes(stage))

    def outputs(self, stage: str) -> List[str]:
        return sorted(self.stages.get(stage, {}).get('outputs', {}))

    def record(self, stage: str, config: RunConfig, outputs: Sequence[str], wall_time: float) -> None:
        relative = {}
        for path in outputs:
            rel = os.path.relpath(path, self.output_dir).replace(os.sep, '/')
            relative[rel] = sha256_file(path)
        self.stages[stage] = {
            'config_hash': config.stage_hash(stage),
            'seed': STAGE_SEEDS[stage](config),
            'inputs': self.input_hashes(stage),
            'outputs': relative,
            TIMING_KEY: {
                'wall_time': round(wall_time, 3),
                'timestamp': datetime.now(timezone.utc).isoformat(timespec='seconds'),
            },
        }

    def reproducible(self) -> Dict[str, Dict]:
        """Записи стадий без отметок времени; совпадает у двух запусков с одной конфигурацией."""
        return {stage: {k: v for k, v in entry.items() if k != TIMING_KEY} for stage, entry in self.stages.items()}


# --- Общие загрузчики ---

def stage_folder(config: RunConfig, stage: str) -> str:
    return ensure_folder(os.path.join(config.output_dir, stage))


def _cohort(config: RunConfig) -> List[PatientRecord]:
    folder = os.path.join(config.output_dir, 'generate')
    return load_cohort(os.path.join(folder, COHORT_FILE), config.generator.vocab_size)


def _teacher(config: RunConfig):
    truth = load_truth(os.path.join(config.output_dir, 'generate'))
    return load_teacher(os.path.join(config.output_dir, 'teach', 'teacher.json'), config.stage_hash('teach'), truth)


def _student(config: RunConfig, stage: str):
    return load_student(os.path.join(config.output_dir, stage, 'student.json'), config.stage_hash(stage))


# --- Стадии ---

def stage_generate(config: RunConfig) -> List[str]:
    folder = stage_folder(config, 'generate')
    records, truth = generate_cohort(config.generator)
    records = split_cohort(records, config.split_fractions, config.generator.seed)
    outputs = [save_cohort(os.path.join(folder, COHORT_FILE), records), save_vocabulary(folder, truth.vocabulary)]
    outputs += save_truth(folder, truth)
    return outputs


def stage_teach(config: RunConfig) -> List[str]:
    folder = stage_folder(config, 'teach')
    if config.teacher.variant == TeacherVariant.ORACLE.value:
        truth = load_truth(os.path.join(config.output_dir, 'generate'))
        teacher = oracle_teacher(truth, config.teacher.noise_sd)
    else:
        records = _cohort(config)
        teacher = train_reference_teacher(
            records_in(records, 'train'), config.teacher, config.generator.vocab_size, records_in(records, 'tune'))
    return [save_teacher(os.path.join(folder, 'teacher.json'), teacher, config.teacher, config.stage_hash('teach'))]


def _train(config: RunConfig, stage: str, distill: bool) -> List[str]:
    folder = stage_folder(config, stage)
    train_config = config.bdld if distill else config.bdl
    records = _cohort(config)
    teacher = _teacher(config) if distill else None
    model = init_student(config.student, train_config.seed)
    model, history = train_student(model, records, teacher, train_config)
    write_json(os.path.join(folder, 'history.json'), history.to_dict())
    return [save_student(os.path.join(folder, 'student.json'), model, config.stage_hash(stage), history=history),
            os.path.join(folder, 'history.json')]


def stage_train_bdl(config: RunConfig) -> List[str]:
    return _train(config, 'train-bdl', distill=False)


def stage_train_bdld(config: RunConfig) -> List[str]:
    return _train(config, 'train-bdld', distill=True)


def stage_evaluate(config: RunConfig) -> List[str]:
    """Сравнение учителя, BDLD и BDL по обоим протоколам и анализ латентных переменных BDLD."""
    folder = stage_folder(config, 'evaluate')
    validation = records_in(_cohort(config), 'validation')
    labels = np.array([r.label for r in validation])
    metrics = config.metrics
    seed = metrics.seed
    matrices = {
        'teacher': teacher_predict_batch(_teacher(config), validation, metrics.n_samples, seed),
        'bdld': predict_matrix(_student(config, 'train-bdld'), validation, metrics.n_samples, seed),
        'bdl': predict_matrix(_student(config, 'train-bdl'), validation, metrics.n_samples, seed),
    }
    outputs: List[str] = []
    summary = {}
    for name, matrix in matrices.items():
        mean_report = evaluate_mean_protocol(matrix, labels, metrics.n_bins)
        ci_report = evaluate_ci_protocol(matrix, labels, metrics.n_rounds, metrics.n_bins)
        outputs += export_report(mean_report, folder, f"{name}_mean30")
        outputs += export_report(ci_report, folder, f"{name}_ci30")
        summary[name] = {
            'mean30': {'auroc': mean_report.auroc, 'auprc': mean_report.auprc},
            'ci30': {'auroc': ci_report.auroc, 'auprc': ci_report.auprc,
                     'auroc_ci': list(ci_report.ci['auroc']), 'auprc_ci': list(ci_report.ci['auprc'])},
        }
        logger.info(tr("{name}: AUROC {auroc:.4f}, AUPRC {auprc:.4f}").format(
            name=name, auroc=mean_report.auroc, auprc=mean_report.auprc))
    summary['n_validation'] = len(validation)
    summary['prevalence'] = float(labels.mean()) if labels.size else None
    outputs.append(write_json(os.path.join(folder, 'metrics.json'), summary))
    outputs += export_latents(folder, latent_frame(_student(config, 'train-bdld'), validation, metrics.n_samples, seed))
    return outputs


def stage_associate(config: RunConfig) -> List[str]:
    folder = stage_folder(config, 'associate')
    records = _cohort(config)
    vocabulary = load_vocabulary(os.path.join(config.output_dir, 'generate'))
    settings = config.association
    model = _student(config, 'train-bdld')
    entries = association_map(model, records, vocabulary, settings.bands, settings.n_samples, settings.seed,
                              settings.coefficient_samples)
    plot_path = os.path.join(folder, 'association.svg') if settings.plot else None
    outputs = export_association(entries, os.path.join(folder, 'association.csv'), plot_path)

    histograms = os.path.join(folder, 'association_age_histograms.csv')
    age_histograms(records, entries, settings.bands).to_csv(histograms, index=False, lineterminator='\n')
    collinearity = os.path.join(folder, 'collinearity.csv')
    collinearity_audit(records, vocabulary, settings.collinearity_sample, settings.collinearity_threshold,
                       settings.seed).to_csv(collinearity, index=False, lineterminator='\n')
    return outputs + [histograms, collinearity]


def select_patients(records: Sequence[PatientRecord], n: int, seed: int) -> List[PatientRecord]:
    """Детерминированная выборка пациентов для объяснений, в порядке идентификаторов."""
    order = rng_for(seed, 'explain-select').permutation(len(records))[:n]
    return sorted((records[i] for i in order), key=lambda r: r.patient_id)


def stage_explain(config: RunConfig) -> List[str]:
    folder = stage_folder(config, 'explain')
    validation = records_in(_cohort(config), 'validation')
    vocabulary = load_vocabulary(os.path.join(config.output_dir, 'generate'))
    model = _student(config, 'train-bdld')
    settings = config.explain
    patients = select_patients(validation, settings.n_patients, settings.seed)
    outputs: List[str] = []
    rows = []
    for result, report in explain_patients(model, patients, settings.explainer, settings.seed):
        outputs += export_explanation(folder, result, report, vocabulary)
        rows.append({
            'patient_id': report.patient_id,
            'p_full_mean': report.p_full.mean,
            'p_selected_mean': report.p_selected.mean,
            'n_selected': report.n_selected,
            'fraction_selected': report.fraction_selected,
        })
    outputs.append(write_json(os.path.join(folder, 'summary.json'), {'patients': rows}))
    return outputs


STAGE_FUNCTIONS: Dict[str, Callable[[RunConfig], List[str]]] = {
    'generate': stage_generate,
    'teach': stage_teach,
    'train-bdl': stage_train_bdl,
    'train-bdld': stage_train_bdld,
    'evaluate': stage_evaluate,
    'associate': stage_associate,
    'explain': stage_explain,
}


def run_stage(config: RunConfig, stage: str, manifest: RunManifest, resume: bool = True) -> RunManifest:
    """
    Выполняет стадию и обновляет манифест.

    При resume стадия с неизменными входами, конфигурацией и целыми выходами пропускается.

    :raises StageDependencyError: Стадии-зависимости не выполнены или их выходы повреждены.
    """
    if stage not in STAGE_FUNCTIONS:
        raise ValueError(tr("Неизвестная стадия: {stage}").format(stage=stage))
    missing = [dep for dep in DEPENDENCIES[stage] if not manifest.outputs_intact(dep)]
    if missing:
        raise StageDependencyError(stage, missing)
    if resume and manifest.is_current(stage, config):
        logger.info(tr("Стадия {stage} актуальна, пропуск").format(stage=stage))
        return manifest

    logger.info(tr("Стадия {stage}: старт").format(stage=stage))
    started = time.perf_counter()
    outputs = STAGE_FUNCTIONS[stage](config)
    wall_time = time.perf_counter() - started
    manifest.record(stage, config, outputs, wall_time)
    manifest.save()
    logger.info(tr("Стадия {stage}: готово за {seconds:.1f} с").format(stage=stage, seconds=wall_time))
    return manifest


def run_all(config: RunConfig, manifest: Optional[RunManifest] = None, resume: bool = True) -> RunManifest:
    manifest = manifest or RunManifest.load(config.output_dir)
    for stage in STAGES:
        manifest = run_stage(config, stage, manifest, resume)
    return manifest