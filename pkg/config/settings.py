from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "INFO"

    # Caps the worker count of data-parallel evaluation (env var THREADS)
    THREADS: int = 1

    OUTPUT_DIR: str = "runs"
    DATA_DIR: str = "data"

    VALIDATION_POINTS_PER_AXIS: int = 101
    LOG_EVERY: int = 500
    BURGERS_QUADRATURE_NODES: int = 2001

    class Config:
        env_file = ".env"        # used only locally
        case_sensitive = True

settings = Settings()
