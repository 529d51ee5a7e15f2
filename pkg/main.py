import argparse
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import List, Optional

from pipeline.report import write_report
from pipeline.stages import RunManifest, run_all, run_stage
from utils.config_utils import STAGES, parse_config
from utils.errors import ConfigError, RiskDistillError
from utils.utils import CONFIG_PATH, CURRENT_VERSION, LANG_ENV, set_language, tr

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Логгер
logger = logging.getLogger(__name__)


def _console_handler() -> logging.Handler:
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO)
    console.setFormatter(logging.Formatter('%(levelname)s - %(message)s'))
    return console


def setup_logging(log_folder: Optional[str] = None) -> Optional[str]:
    """
    Настройка логирования: файл с ротацией в log_folder и консоль.

    :return: Путь к файлу журнала или None, если папка не задана.
    """
    handlers: List[logging.Handler] = [_console_handler()]
    log_filename = None
    if log_folder:
        os.makedirs(log_folder, exist_ok=True)
        log_filename = os.path.join(log_folder, f"riskdistill_v{CURRENT_VERSION}.log")
        handler = RotatingFileHandler(log_filename, maxBytes=1 * 1024 * 1024, backupCount=3, encoding='utf-8')
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.insert(0, handler)
    logging.basicConfig(handlers=handlers, level=logging.DEBUG, force=True)
    return log_filename


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='riskdistill',
        description=tr("Дистилляция модели риска в байесовскую модель с двумя латентными переменными"),
    )
    parser.add_argument('command', choices=list(STAGES) + ['all', 'report'], help=tr("стадия, all или report"))
    parser.add_argument('--config', default=CONFIG_PATH, help=tr("путь к INI-конфигурации"))
    parser.add_argument('--seed', type=int, default=None, help=tr("глобальное зерно (переопределяет зёрна стадий)"))
    parser.add_argument('--output-dir', default=None, help=tr("папка результатов"))
    parser.add_argument('--resume', action='store_true', help=tr("пропускать актуальные стадии"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Точка входа CLI; возвращает код завершения."""
    args = build_parser().parse_args(argv)
    setup_logging()

    try:
        config = parse_config(args.config)
        if args.seed is not None:
            config = config.reseeded(args.seed)
        if args.output_dir:
            config.output_dir = os.path.abspath(args.output_dir)
    except ConfigError as e:
        logger.error(tr("Ошибка конфигурации: {error}").format(error=e))
        return EXIT_CONFIG

    if not os.environ.get(LANG_ENV):
        try:
            set_language(config.language)
        except ValueError:
            logger.warning(tr("Язык {lang} не поддерживается").format(lang=config.language))

    log_file = setup_logging(os.path.join(config.output_dir, 'logs'))
    logger.info(tr("riskdistill {version}: команда {command}, журнал {log}").format(
        version=CURRENT_VERSION, command=args.command, log=log_file))

    try:
        manifest = RunManifest.load(config.output_dir)
        if args.command == 'all':
            manifest = run_all(config, manifest, args.resume)
            write_report(manifest, config.output_dir)
        elif args.command == 'report':
            write_report(manifest, config.output_dir)
        else:
            run_stage(config, args.command, manifest, args.resume)
    except ConfigError as e:
        logger.error(tr("Ошибка конфигурации: {error}").format(error=e), exc_info=True)
        return EXIT_CONFIG
    except (RiskDistillError, OSError) as e:
        logger.error(tr("Стадия завершилась с ошибкой: {error}").format(error=e), exc_info=True)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
