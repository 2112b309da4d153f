import os, sys
import logging
sys.stdout.reconfigure(encoding='utf-8')

def setup_logger(output_path, log_file_suffix="log", overwrite=True, log_root="./Logs"):
    """
    Sets up the application logger to log messages to a file under log_root and to the console.
    Library modules log through logging.getLogger(__name__), so handlers go on the root logger.
    Suppresses logs from external libraries.

    Args:
        output_path (str): Output file or directory of the command; its stem names the log file.
        log_file_suffix (str): Suffix for the log file name (default: "log").
        overwrite (bool): Whether to overwrite the log file each time (default: True).
        log_root (str): Directory holding the log files (default: "./Logs").

    Returns:
        logging.Logger: Configured logger instance.
    """
    os.makedirs(log_root, exist_ok=True)

    # Derive the log file path: ./Logs/<stem of output_path>.<suffix>
    stem = os.path.basename(os.path.normpath(output_path)) or "gmm_em"
    stem = os.path.splitext(stem)[0]
    log_path = os.path.join(log_root, f"{stem}.{log_file_suffix}")

    logger = logging.getLogger()
    logger.setLevel(logging.DEBUG)

    # Clear existing handlers to avoid duplicate logs
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    file_mode = 'w' if overwrite else 'a'
    file_handler = logging.FileHandler(log_path, mode=file_mode, encoding='utf-8')
    file_handler.setFormatter(logging.Formatter('%(message)s'))
    logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter('%(message)s'))
    console_handler.setLevel(logging.INFO)
    logger.addHandler(console_handler)

    # Suppress logs from external libraries
    for lib_logger in ("numexpr", "asyncio"):
        logging.getLogger(lib_logger).setLevel(logging.WARNING)

    return logger
