import os

from uniroute.utils import casting

try:
    from dotenv import load_dotenv

    load_dotenv()
except:  # noqa
    pass

DEFAULT_DEBUG = "False"
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_NUM_THREADS = "1"
DEFAULT_TIMEZONE = "UTC"


def is_debug_active() -> bool:
    value = os.environ.get("UNIROUTE_DEBUG", DEFAULT_DEBUG)
    return casting.bool_from_string(value)


def get_log_level() -> str:
    return os.environ.get("UNIROUTE_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


def get_num_threads() -> int:
    return int(os.environ.get("UNIROUTE_NUM_THREADS", DEFAULT_NUM_THREADS))


def get_timezone_region() -> str:
    return os.environ.get("UNIROUTE_TIMEZONE", DEFAULT_TIMEZONE)
