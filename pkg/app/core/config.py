# app/core/config.py
import logging
import sys

from loguru import logger
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """ Process-level settings for the receptive-field toolkit """
    SERVICE_NAME: str = "STRF Dynamic Texture Toolkit"
    LOG_LEVEL: str = Field(default="INFO", validation_alias='LOG_LEVEL')

    # Cache and artifacts
    cache_dir: str = Field(default=".strf_cache", validation_alias='STRF_CACHE_DIR')

    # Streams without a declared rate (PGM directories, synthetic streams)
    default_fps: float = Field(default=25.0, gt=0, validation_alias='STRF_DEFAULT_FPS')

    # Worker pool for per-video extraction; 1 runs inline
    workers: int = Field(default=1, gt=0, validation_alias='STRF_WORKERS')

    # PCA fitting sample drawn from the interior pixels of each training video
    pca_samples_per_video: int = Field(default=10_000, gt=0, validation_alias='STRF_PCA_SAMPLES_PER_VIDEO')

    # SVM solver iteration cap
    svm_max_iter: int = Field(default=1_000_000, gt=0, validation_alias='STRF_SVM_MAX_ITER')

    model_config = SettingsConfigDict(
        env_file='.env',
        env_file_encoding='utf-8',
        extra='ignore'
    )


settings = Settings()

_log_level_to_use = settings.LOG_LEVEL.upper()
logger.remove()
log_format = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | "
    "<level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
# stderr keeps stdout free for report tables
logger.add(sys.stderr, format=log_format, level=_log_level_to_use)

logging.getLogger("sklearn").setLevel(logging.WARNING)
logging.getLogger("numexpr").setLevel(logging.WARNING)

logger.debug(f"Configuration loaded for {settings.SERVICE_NAME}. Log level: {_log_level_to_use}.")
logger.debug(f"Cache dir: {settings.cache_dir}, default fps: {settings.default_fps}, workers: {settings.workers}")
