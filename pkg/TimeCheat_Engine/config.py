import os
from dotenv import load_dotenv

load_dotenv()  # take environment variables from .env.


class Config:
    # TIMECHEAT_SEED is read per run in app.run_config.apply_env
    LOG_LEVEL = os.getenv('TIMECHEAT_LOG_LEVEL', 'INFO')
    RUN_DIR = os.getenv('TIMECHEAT_RUN_DIR', 'runs')
    DTYPE = os.getenv('TIMECHEAT_DTYPE', 'float64')
