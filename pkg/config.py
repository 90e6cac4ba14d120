# config.py
import os
from dataclasses import dataclass

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass


@dataclass
class Settings:
    # Параллелизм и воспроизводимость
    threads: int = int(os.getenv("OPACK_THREADS", "1") or 1)
    seed: int = int(os.getenv("OPACK_SEED", "20240601") or 20240601)

    # Логирование
    log_level: str = (os.getenv("LOG_LEVEL", "INFO") or "INFO").strip()

    # Свобода выбора в строгих неравенствах алгоритма дизайна
    phi_fraction: float = float(os.getenv("OPACK_PHI_FRACTION", "0.0") or 0.0)
    theta_fraction: float = float(os.getenv("OPACK_THETA_FRACTION", "0.9") or 0.9)

    # Лимиты и выборки
    max_states: int = int(os.getenv("OPACK_MAX_STATES", "200000") or 200000)
    samples: int = int(os.getenv("OPACK_SAMPLES", "500") or 500)

    # Отчёты
    float_digits: int = int(os.getenv("OPACK_FLOAT_DIGITS", "12") or 12)
    schema_version: int = 1


settings = Settings()
