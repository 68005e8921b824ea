"""Carga y validación de variables de entorno."""

import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent
DATA_DIR = BASE_DIR / "data"
LOG_DIR = BASE_DIR / "logs"
TEMPLATES_DIR = BASE_DIR / "templates"
CIRCUITS_DIR = BASE_DIR / "circuits"

load_dotenv(BASE_DIR / ".env")

VALID_PRECISIONS = ("float32", "float64")
VALID_MEASURE_MODES = ("analytic", "exact", "approx")
VALID_GRAD_REDUCTIONS = ("sum", "mean")
VALID_ANSATZ_INITS = ("uniform", "zeros")


def validate() -> None:
    """Valida que los valores de configuración estén en rango."""
    if QSIM_PRECISION not in VALID_PRECISIONS:
        logging.critical(
            "QSIM_PRECISION inválido: %s. Valores válidos: %s",
            QSIM_PRECISION,
            ", ".join(VALID_PRECISIONS),
        )
        sys.exit(1)
    if QSIM_RANK_CAP < 5:
        logging.critical("QSIM_RANK_CAP debe ser al menos 5")
        sys.exit(1)
    if QSIM_RANKS <= 0 or QSIM_RANKS & (QSIM_RANKS - 1):
        logging.critical("QSIM_RANKS debe ser potencia de dos: %d", QSIM_RANKS)
        sys.exit(1)
    if QSIM_SHOTS < 0:
        logging.critical("QSIM_SHOTS no puede ser negativo")
        sys.exit(1)
    if QSIM_MEASURE_MODE not in VALID_MEASURE_MODES:
        logging.critical(
            "QSIM_MEASURE_MODE inválido: %s. Valores válidos: %s",
            QSIM_MEASURE_MODE,
            ", ".join(VALID_MEASURE_MODES),
        )
        sys.exit(1)
    if QSIM_GRAD_REDUCTION not in VALID_GRAD_REDUCTIONS:
        logging.critical("QSIM_GRAD_REDUCTION debe ser sum o mean")
        sys.exit(1)
    if QSIM_ANSATZ_INIT not in VALID_ANSATZ_INITS:
        logging.critical("QSIM_ANSATZ_INIT debe ser uniform o zeros")
        sys.exit(1)
    if QSIM_REPLAY_TOLERANCE <= 0:
        logging.critical("QSIM_REPLAY_TOLERANCE debe ser mayor a 0")
        sys.exit(1)
    if QSIM_COLLECTIVE_TIMEOUT <= 0:
        logging.critical("QSIM_COLLECTIVE_TIMEOUT debe ser mayor a 0")
        sys.exit(1)
    if ADAM_LR <= 0:
        logging.critical("ADAM_LR debe ser mayor a 0")
        sys.exit(1)
    if not (0 <= ADAM_BETA1 < 1 and 0 <= ADAM_BETA2 < 1):
        logging.critical("ADAM_BETA1 y ADAM_BETA2 deben estar en [0, 1)")
        sys.exit(1)
    if QSIM_MEMORY_BUDGET_GB <= 0:
        logging.critical("QSIM_MEMORY_BUDGET_GB debe ser mayor a 0")
        sys.exit(1)
    if QSIM_PROFILE_MAX_QUBITS < 2:
        logging.critical("QSIM_PROFILE_MAX_QUBITS debe ser al menos 2")
        sys.exit(1)
    if QSIM_PROFILE_BATCH <= 0 or QSIM_PROFILE_DEPTH <= 0:
        logging.critical("QSIM_PROFILE_BATCH y QSIM_PROFILE_DEPTH deben ser mayores a 0")
        sys.exit(1)
    if (RANK_ENV or WORLD_SIZE_ENV) and not (RANK_ENV and WORLD_SIZE_ENV):
        logging.critical("RANK y WORLD_SIZE deben definirse juntos para transporte real")
        sys.exit(1)


QSIM_PRECISION = os.environ.get("QSIM_PRECISION", "float64").strip().lower()
# Rango máximo del tensor local: batch + sharded + grupos + componente re/im.
QSIM_RANK_CAP = int(os.environ.get("QSIM_RANK_CAP", "16"))
QSIM_RANKS = int(os.environ.get("QSIM_RANKS", "1"))
QSIM_SEED = int(os.environ.get("QSIM_SEED", "0"))
QSIM_SHOTS = int(os.environ.get("QSIM_SHOTS", "0"))
QSIM_MEASURE_MODE = os.environ.get("QSIM_MEASURE_MODE", "analytic").strip().lower()
QSIM_INVERTIBLE = os.environ.get("QSIM_INVERTIBLE", "1") == "1"
QSIM_GRAD_REDUCTION = os.environ.get("QSIM_GRAD_REDUCTION", "sum").strip().lower()
QSIM_REPLAY_TOLERANCE = float(os.environ.get("QSIM_REPLAY_TOLERANCE", "1e-8"))
QSIM_COLLECTIVE_TIMEOUT = float(os.environ.get("QSIM_COLLECTIVE_TIMEOUT", "120"))
QSIM_ANSATZ_INIT = os.environ.get("QSIM_ANSATZ_INIT", "uniform").strip().lower()
QSIM_TORCH_THREADS = int(os.environ.get("QSIM_TORCH_THREADS", "0"))
ADAM_LR = float(os.environ.get("ADAM_LR", "1e-3"))
ADAM_BETA1 = float(os.environ.get("ADAM_BETA1", "0.9"))
ADAM_BETA2 = float(os.environ.get("ADAM_BETA2", "0.999"))
ADAM_EPS = float(os.environ.get("ADAM_EPS", "1e-8"))
# Presupuesto de memoria para el pre-flight de profile (una sola máquina).
QSIM_MEMORY_BUDGET_GB = float(os.environ.get("QSIM_MEMORY_BUDGET_GB", "16"))
QSIM_PROFILE_MAX_QUBITS = int(os.environ.get("QSIM_PROFILE_MAX_QUBITS", "22"))
QSIM_PROFILE_BATCH = int(os.environ.get("QSIM_PROFILE_BATCH", "2"))
QSIM_PROFILE_DEPTH = int(os.environ.get("QSIM_PROFILE_DEPTH", "3"))
OUTPUT_DIR = Path(os.environ.get("OUTPUT_DIR", str(BASE_DIR / "out"))).expanduser()

# Transporte real (patrón torchrun): RANK/WORLD_SIZE/MASTER_ADDR/MASTER_PORT.
RANK_ENV = os.environ.get("RANK", "").strip()
WORLD_SIZE_ENV = os.environ.get("WORLD_SIZE", "").strip()
MASTER_ADDR = os.environ.get("MASTER_ADDR", "127.0.0.1").strip()
MASTER_PORT = int(os.environ.get("MASTER_PORT", "29500"))

LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").strip().upper()
DB_PATH = DATA_DIR / "qsim_state.db"


def setup_logging() -> None:
    LOG_DIR.mkdir(parents=True, exist_ok=True)
    from logging.handlers import RotatingFileHandler

    handler = RotatingFileHandler(
        LOG_DIR / "qsim.log",
        maxBytes=5 * 1024 * 1024,
        backupCount=3,
        encoding="utf-8",
    )
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=[handler, logging.StreamHandler()],
    )
    if QSIM_TORCH_THREADS > 0:
        import torch

        torch.set_num_threads(QSIM_TORCH_THREADS)


if __name__ == "__main__":
    setup_logging()
    validate()
    logging.info(
        "Configuración válida. precision=%s rank_cap=%d ranks=%d",
        QSIM_PRECISION,
        QSIM_RANK_CAP,
        QSIM_RANKS,
    )
