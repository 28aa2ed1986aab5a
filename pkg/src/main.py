"""
Главный модуль лаборатории OoD-детекции.
Командная строка: train, sample, detect, sweep, gap, attack, report.

Все результаты пишутся в директорию --out вместе с manifest.json (список
артефактов и хеш конфигурации) и журналом oodnorm.log.

Таблицы CSV:
    train_log.csv          step, train_loss_nats, eval_bpd_holdout
    detection_report.csv   statistic, auc, ap, n_pos, n_neg
    scores.csv             sample_id, statistic_name, score, label
    sweep.csv              ratio, mean_bpd, stderr
    mode_gap.csv           dataset, n_samples, eval_bpd, train_bpd, gap_bpd
    attack_result.csv      tuned_T, median_gap_bpd, fooled_auc, iterations
    attack_report.csv      statistic, auc, ap, n_pos, n_neg
    attack_roc.csv         statistic, fpr, tpr, threshold
    p_train.csv, p_test.csv, q_test.csv   x0, x1, ... (первая строка - метаданные)

При attack.q_fit = true модель q атаки подбирается по данным scenario.q и
сохраняется в q_model.json.

Коды возврата: 0 - успех, 2 - ошибка конфигурации, 3 - расходимость
обучения, 4 - ошибка данных.
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import CONFIG, RunConfig, parse_float_list
from data_processing import read_dataset_csv, write_dataset_csv, write_frame_csv
from evaluation_metrics import (
    DetectionReport,
    build_report,
    roc_points,
    write_report_csv,
    write_scores_csv,
)
from exceptions import ConfigError, DataError, DivergenceError, InputError, OodNormError
from flow_model import (
    EvalMode,
    FlowArchitecture,
    FlowModel,
    build_appendix_flow,
    build_flow,
    load_model,
    save_model,
)
from flow_training import EnsembleSpec, TrainConfig, calibrate_running_stats, fit_flow, train_ensemble
from ood_statistics import (
    STREAM_TEST,
    StatisticConfig,
    attack_tune_temperature,
    mode_gap_table,
    reference_deltas,
    score_dataset,
    scored_samples,
    stat_loglik,
    stat_perm,
    stat_T_rank,
    stat_waic,
    sweep_ratio,
)
from report_module import render_summary
from synthetic_data import Dataset, GaussianFit, ScenarioSpec, sample, sample_temperature, train_holdout_split

logger = logging.getLogger(__name__)

MODEL_FILE = 'model.json'
ENSEMBLE_DIR = 'ensemble'
STATISTICS = ('loglik', 'perm', 'waic', 'rank')
P_HOLDOUT = 'p_holdout'

# Смещения seed для независимых потоков данных
SEED_P_TEST = 1
SEED_Q_TEST = 2
SEED_ATTACK = 3
SEED_Q_TRAIN = 4
SEED_GAP = 5


def setup_logging(out_dir: str, verbose: bool = False) -> None:
    """Настраивает журнал: stdout и oodnorm.log в выходной директории."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(out_dir, CONFIG.LOG_FILE), encoding='utf-8'),
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


# ---------------------------------------------------------------------------
# Сборка объектов из конфигурации
# ---------------------------------------------------------------------------

def _scenario_spec(run: RunConfig, section: str, seed: int, n: Optional[int] = None) -> ScenarioSpec:
    values = run.section(section)
    name = values.pop('name')
    count = values.pop('n') if n is None else n
    label = values.pop('label')
    return ScenarioSpec(name=name, n=count, seed=seed, params=values, label=label)


def training_data(run: RunConfig) -> Tuple[Dataset, Dataset]:
    """Обучающая и отложенная части данных p (из файла или генератора)."""
    path = run.get('paths', 'p_data')
    dataset = read_dataset_csv(path) if path else sample(_scenario_spec(run, 'scenario.p', run.seed))
    return train_holdout_split(dataset, run.get('train', 'holdout_fraction'), run.seed)


def evaluation_sets(run: RunConfig, p_model: Optional[FlowModel] = None) -> Tuple[Dataset, Dataset]:
    """
    Тестовые наборы: свежие образцы p (метка 0) и кандидаты q.

    Имя сценария q = p_holdout даёт нулевой случай: q - ещё одна выборка из p.
    """
    n_test = run.get('stats', 'n_test')
    p_test = sample(_scenario_spec(run, 'scenario.p', run.seed + SEED_P_TEST, n=n_test)).relabel(0)

    q_path = run.get('paths', 'q_data')
    if q_path:
        return p_test, read_dataset_csv(q_path)
    if run.get('scenario.q', 'name') == P_HOLDOUT:
        q_spec = _scenario_spec(run, 'scenario.p', run.seed + SEED_Q_TEST, n=run.get('scenario.q', 'n'))
        return p_test, sample(q_spec).relabel(run.get('scenario.q', 'label'))
    return p_test, sample(_scenario_spec(run, 'scenario.q', run.seed + SEED_Q_TEST), model=p_model)


def build_model(run: RunConfig, dim: int, seed: int) -> FlowModel:
    params = run.section('model')
    if params['kind'] == 'appendix':
        if dim % 2:
            raise ConfigError("Модель appendix требует чётную размерность данных")
        return build_appendix_flow(pairs=dim // 2, eps=params['eps'], momentum=params['momentum'])
    if params['kind'] != 'flow':
        raise ConfigError(f"Неизвестный тип модели {params['kind']!r}")
    return build_flow(architecture(run, dim), seed)


def architecture(run: RunConfig, dim: int) -> FlowArchitecture:
    params = run.section('model')
    return FlowArchitecture(
        dim=dim,
        n_layers=params['n_layers'],
        hidden=params['hidden'],
        n_hidden=params['n_hidden'],
        batchnorm=params['batchnorm'],
        scale_cap=params['scale_cap'],
        eps=params['eps'],
        momentum=params['momentum'],
    )


def train_config(run: RunConfig, seed: int) -> TrainConfig:
    params = run.section('train')
    try:
        return TrainConfig(
            batch_size=params['batch_size'],
            steps=params['steps'],
            learning_rate=params['learning_rate'],
            adam_beta1=params['adam_beta1'],
            adam_beta2=params['adam_beta2'],
            adam_eps=params['adam_eps'],
            bn_momentum=params['bn_momentum'],
            seed=seed,
            eval_every=params['eval_every'],
            log_every=params['log_every'],
        )
    except InputError as e:
        raise ConfigError(str(e)) from e


def statistic_config(run: RunConfig) -> StatisticConfig:
    params = run.section('stats')
    return StatisticConfig(
        b=params['b'],
        r1=params['r1'],
        r2=params['r2'],
        mc_reps=params['mc_reps'],
        seed=run.seed,
    )


def requested_statistics(run: RunConfig) -> List[str]:
    names = [s.strip() for s in run.get('stats', 'statistics').split(',') if s.strip()]
    unknown = [s for s in names if s not in STATISTICS]
    if unknown or not names:
        raise ConfigError(f"Неизвестные статистики {unknown}; доступны: {', '.join(STATISTICS)}")
    return names


def load_p_model(run: RunConfig, out_dir: str) -> FlowModel:
    path = run.get('paths', 'model') or os.path.join(out_dir, MODEL_FILE)
    if not os.path.exists(path):
        raise DataError(f"Файл модели не найден: {path} (сначала выполните train)")
    return load_model(path)


def load_ensemble(run: RunConfig, out_dir: str) -> List[FlowModel]:
    directory = run.get('paths', 'ensemble_dir') or os.path.join(out_dir, ENSEMBLE_DIR)
    files = sorted(f for f in os.listdir(directory) if f.endswith('.json')) if os.path.isdir(directory) else []
    if not files:
        raise DataError(f"Ансамбль для WAIC не найден в {directory} (train с [ensemble] enabled = true)")
    return [load_model(os.path.join(directory, f)) for f in files]


def reference_split(run: RunConfig, train: Dataset) -> Tuple[Dataset, Dataset]:
    """Эталонные образцы для рангов и непересекающийся с ними пул компаньонов."""
    n_reference = run.get('stats', 'n_reference')
    if train.n_samples <= n_reference:
        raise DataError(f"Нужно больше {n_reference} обучающих образцов, получено {train.n_samples}")
    return train.subset(np.arange(n_reference)), train.subset(np.arange(n_reference, train.n_samples))


# ---------------------------------------------------------------------------
# Подкоманды
# ---------------------------------------------------------------------------

def cmd_train(run: RunConfig, out_dir: str) -> List[str]:
    """Обучает модель (и ансамбль, если включён) и сохраняет журнал обучения."""
    logger.info("Шаг 1: Подготовка обучающих данных")
    train, holdout = training_data(run)
    logger.info(f"Обучающих образцов: {train.n_samples}, отложенных: {holdout.n_samples}, размерность {train.dim}")

    logger.info("Шаг 2: Обучение модели")
    cfg = train_config(run, run.seed)
    model = build_model(run, train.dim, run.seed)
    trained, log_frame = fit_flow(model, train, cfg, holdout=holdout)
    if run.get('train', 'calibrate') and trained.has_batchnorm:
        trained = calibrate_running_stats(trained, train, cfg.batch_size, run.seed)

    artifacts = [MODEL_FILE, 'train_log.csv']
    save_model(trained, os.path.join(out_dir, MODEL_FILE))
    write_frame_csv(log_frame, os.path.join(out_dir, 'train_log.csv'))
    if not log_frame.empty:
        evaluated = log_frame['eval_bpd_holdout'].dropna()
        if not evaluated.empty:
            logger.info(f"BPD на отложенной выборке в конце обучения: {evaluated.iloc[-1]:.4f}")

    if run.get('ensemble', 'enabled'):
        logger.info("Шаг 3: Обучение ансамбля для WAIC")
        spec = EnsembleSpec(k=run.get('ensemble', 'k'), base_seed=run.seed, train=cfg)
        members = train_ensemble(spec, train, architecture(run, train.dim))
        os.makedirs(os.path.join(out_dir, ENSEMBLE_DIR), exist_ok=True)
        for i, member in enumerate(members):
            name = os.path.join(ENSEMBLE_DIR, f"member_{i}.json")
            save_model(member, os.path.join(out_dir, name))
            artifacts.append(name)
    return artifacts


def cmd_sample(run: RunConfig, out_dir: str) -> List[str]:
    """Сохраняет обучающие и тестовые наборы в CSV."""
    train, _ = training_data(run)
    model_path = run.get('paths', 'model') or os.path.join(out_dir, MODEL_FILE)
    model = load_model(model_path) if os.path.exists(model_path) else None
    p_test, q_test = evaluation_sets(run, model)
    for name, dataset in (('p_train.csv', train), ('p_test.csv', p_test), ('q_test.csv', q_test)):
        write_dataset_csv(dataset, os.path.join(out_dir, name))
    return ['p_train.csv', 'p_test.csv', 'q_test.csv']


def _rank_scores(model, run: RunConfig, train: Dataset, datasets: Sequence[Dataset]) -> List[np.ndarray]:
    cfg = statistic_config(run)
    reference, pool = reference_split(run, train)
    logger.info(f"Эталонные Delta по {reference.n_samples} обучающим образцам")
    ref_deltas = reference_deltas(model, reference, pool, cfg, block_size=datasets[0].n_samples)
    ranks = []
    for offset, dataset in enumerate(datasets):
        deltas = score_dataset(model, dataset, pool, cfg, stream=STREAM_TEST + offset)
        ranks.append(stat_T_rank(deltas, ref_deltas).astype(np.float64))
    return ranks


def cmd_detect(run: RunConfig, out_dir: str) -> List[str]:
    """Считает статистики на тестовых наборах p и q и строит отчёт AUC/AP."""
    statistics = requested_statistics(run)
    logger.info("Шаг 1: Загрузка модели и данных")
    model = load_p_model(run, out_dir)
    ensemble = load_ensemble(run, out_dir) if 'waic' in statistics else None
    train, _ = training_data(run)
    p_test, q_test = evaluation_sets(run, model)

    train_ll = model.log_likelihood(train.data, EvalMode.EVALUATION)
    logger.info(f"Шаг 2: Расчёт статистик {', '.join(statistics)}")
    scorers: Dict[str, Callable[[], List[np.ndarray]]] = {
        'loglik': lambda: [stat_loglik(model, d.data) for d in (p_test, q_test)],
        'perm': lambda: [stat_perm(model, d.data, train_ll) for d in (p_test, q_test)],
        'waic': lambda: [stat_waic(ensemble, d.data) for d in (p_test, q_test)],
        'rank': lambda: _rank_scores(model, run, train, [p_test, q_test]),
    }
    reports: List[DetectionReport] = []
    for name in statistics:
        p_scores, q_scores = scorers[name]()
        scored = scored_samples(p_test, p_scores) + scored_samples(q_test, q_scores)
        reports.append(build_report(name, scored))
    logger.info(f"Оценено образцов: {p_test.n_samples + q_test.n_samples}")

    logger.info("Шаг 3: Сохранение отчётов")
    write_report_csv(reports, os.path.join(out_dir, 'detection_report.csv'))
    write_scores_csv(reports, os.path.join(out_dir, 'scores.csv'))
    return ['detection_report.csv', 'scores.csv']


def cmd_sweep(run: RunConfig, out_dir: str) -> List[str]:
    """Средний BPD тестового набора в зависимости от доли тестовых образцов в батче."""
    model = load_p_model(run, out_dir)
    train, _ = training_data(run)
    p_test, q_test = evaluation_sets(run, model)
    which = run.get('sweep', 'test')
    if which not in ('p', 'q'):
        raise ConfigError(f"sweep.test должен быть p или q, получено {which!r}")
    test = p_test if which == 'p' else q_test
    test = test.subset(np.arange(min(run.get('sweep', 'n_test'), test.n_samples)))
    ratios = parse_float_list(run.get('sweep', 'ratios'), 'sweep.ratios')

    logger.info(f"Развёртка по r={ratios} на {test.n_samples} образцах ({which})")
    table = sweep_ratio(model, test, train, ratios, statistic_config(run))
    for row in table.itertuples(index=False):
        logger.info(f"  r={row.ratio:.2f}: BPD={row.mean_bpd:.4f} ± {row.stderr:.4f}")
    write_frame_csv(table, os.path.join(out_dir, 'sweep.csv'))
    return ['sweep.csv']


def cmd_gap(run: RunConfig, out_dir: str) -> List[str]:
    """
    Средний BPD чистых батчей в training и evaluation mode для p_test, q_test
    и сэмплов модели при температурах gap.temperatures.
    """
    model = load_p_model(run, out_dir)
    p_test, q_test = evaluation_sets(run, model)
    temperatures = parse_float_list(run.get('gap', 'temperatures'), 'gap.temperatures')
    datasets = [('p_test', p_test), ('q_test', q_test)]
    for i, T in enumerate(temperatures):
        samples = sample_temperature(model, p_test.n_samples, T, run.seed + SEED_GAP + i)
        datasets.append((f"temperature_{T:g}", samples))

    b = run.get('stats', 'b')
    logger.info(f"Разрыв training - evaluation по батчам из {b} образцов")
    table = mode_gap_table(model, datasets, b)
    write_frame_csv(table, os.path.join(out_dir, 'mode_gap.csv'))
    return ['mode_gap.csv']


def attack_q_model(run: RunConfig, out_dir: str, p_model: FlowModel) -> Tuple[FlowModel, List[str]]:
    """
    Модель q для атаки: из файла attack.q_model, диагональная гауссиана по
    данным scenario.q (attack.q_fit) или сама p_model.
    """
    params = run.section('attack')
    if params['q_model']:
        return load_model(params['q_model']), []
    if not params['q_fit']:
        logger.info("Модель q не задана: атакуем сэмплами самой p_model")
        return p_model, []

    q_data = sample(_scenario_spec(run, 'scenario.q', run.seed + SEED_Q_TRAIN), model=p_model)
    if q_data.dim != p_model.dim:
        raise ConfigError(f"Размерность scenario.q ({q_data.dim}) не совпадает с моделью p ({p_model.dim})")
    q_model = GaussianFit.fit(q_data).to_flow()
    save_model(q_model, os.path.join(out_dir, 'q_model.json'))
    logger.info(f"Модель q подобрана по {q_data.n_samples} образцам сценария {q_data.scenario}")
    return q_model, ['q_model.json']


def cmd_attack(run: RunConfig, out_dir: str) -> List[str]:
    """Атака температурой и сравнение perm и rank на атакующих сэмплах."""
    params = run.section('attack')
    p_model = load_p_model(run, out_dir)
    q_model, artifacts = attack_q_model(run, out_dir, p_model)
    train, _ = training_data(run)
    p_test, _ = evaluation_sets(run, p_model)

    logger.info("Шаг 1: Подбор температуры")
    result = attack_tune_temperature(
        p_model,
        q_model,
        (params['t_lo'], params['t_hi']),
        target=p_test,
        reference=train,
        n_samples=params['n_samples'],
        seed=run.seed + SEED_ATTACK,
        tol_bpd=params['tol_bpd'],
        max_iter=params['max_iter'],
        grid_points=params['grid_points'],
    )
    attacked = result.samples.relabel(1)

    logger.info("Шаг 2: Статистики perm и rank на атакующих сэмплах")
    train_ll = p_model.log_likelihood(train.data, EvalMode.EVALUATION)
    perm = [stat_perm(p_model, d.data, train_ll) for d in (p_test, attacked)]
    rank = _rank_scores(p_model, run, train, [p_test, attacked])
    reports = [
        build_report(name, scored_samples(p_test, scores[0]) + scored_samples(attacked, scores[1]))
        for name, scores in (('perm', perm), ('rank', rank))
    ]

    result_frame = pd.DataFrame([{
        'tuned_T': result.tuned_T,
        'median_gap_bpd': result.median_gap_bpd,
        'fooled_auc': result.fooled_auc,
        'iterations': result.iterations,
    }])
    roc = pd.concat(
        [roc_points(r.scores, r.labels).assign(statistic=r.statistic_name) for r in reports],
        ignore_index=True,
    )[['statistic', 'fpr', 'tpr', 'threshold']]

    write_frame_csv(result_frame, os.path.join(out_dir, 'attack_result.csv'))
    write_report_csv(reports, os.path.join(out_dir, 'attack_report.csv'))
    write_frame_csv(roc, os.path.join(out_dir, 'attack_roc.csv'))
    return artifacts + ['attack_result.csv', 'attack_report.csv', 'attack_roc.csv']


def cmd_report(run: RunConfig, out_dir: str) -> List[str]:
    render_summary(out_dir)
    return ['summary.md']


COMMANDS = {
    'train': cmd_train,
    'sample': cmd_sample,
    'detect': cmd_detect,
    'sweep': cmd_sweep,
    'gap': cmd_gap,
    'attack': cmd_attack,
    'report': cmd_report,
}


def write_manifest(out_dir: str, command: str, run: RunConfig, artifacts: List[str]) -> str:
    """
    Дописывает запуск в manifest.json: команда, хеш конфигурации и артефакты.
    Повторный запуск той же команды заменяет её запись.
    """
    path = os.path.join(out_dir, CONFIG.MANIFEST_FILE)
    manifest = {'config_hash': run.config_hash(), 'runs': []}
    if os.path.exists(path):
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    manifest['config_hash'] = run.config_hash()
    manifest['runs'] = [r for r in manifest.get('runs', []) if r['command'] != command]
    manifest['runs'].append({'command': command, 'config_hash': run.config_hash(), 'artifacts': sorted(artifacts)})
    manifest['artifacts'] = sorted({a for r in manifest['runs'] for a in r['artifacts']})
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Лаборатория OoD-детекции на нормализующих потоках с BatchNorm',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument('command', choices=sorted(COMMANDS), help='Подкоманда')
    parser.add_argument('--config', help='INI-файл конфигурации')
    parser.add_argument('--out', required=True, help='Директория для результатов')
    parser.add_argument('--steps', type=int, help='Переопределить train.steps')
    parser.add_argument('--seed', type=int, help='Переопределить run.seed')
    parser.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Переопределить произвольный параметр конфигурации')
    parser.add_argument('--verbose', action='store_true', help='Подробный журнал (DEBUG)')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Выполняет подкоманду и возвращает код возврата.
    """
    args = build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    setup_logging(args.out, args.verbose)
    start_time = time.time()

    try:
        run = RunConfig.from_file(args.config) if args.config else RunConfig()
        run.apply_overrides(args.set)
        # --steps и --seed имеют приоритет над --set
        if args.steps is not None:
            run.set('train', 'steps', args.steps)
        if args.seed is not None:
            run.set('run', 'seed', args.seed)

        logger.info("=" * 50)
        logger.info(f"ЗАПУСК: {args.command} (хеш конфигурации {run.config_hash()[:12]})")
        logger.info("=" * 50)

        artifacts = COMMANDS[args.command](run, args.out)
        write_manifest(args.out, args.command, run, artifacts)

        logger.info(f"Команда {args.command} завершена за {time.time() - start_time:.2f} с")
        return CONFIG.EXIT_CODES['ok']

    except ConfigError as e:
        logger.error(f"Ошибка конфигурации: {e}")
        return CONFIG.EXIT_CODES['config']
    except DivergenceError as e:
        logger.error(f"Расходимость обучения: {e}")
        return CONFIG.EXIT_CODES['divergence']
    except (DataError, InputError) as e:
        logger.error(f"Ошибка данных: {e}")
        return CONFIG.EXIT_CODES['data']
    except OodNormError as e:
        logger.error(f"Ошибка: {e}")
        logger.exception("Детали ошибки:")
        return 1


if __name__ == "__main__":
    sys.exit(main())
