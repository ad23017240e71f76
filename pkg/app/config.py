from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SAPEF_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"  # Ignore extra fields like host, port (uvicorn params)
    )

    # Overrides the output directory of every experiment config when set
    output_dir: Optional[Path] = None

    # Thread pool size for clients, replicates and sweep cells; never changes results
    workers: int = 1

    log_level: str = "INFO"

    # Application Configuration
    environment: str = "development"
    debug: bool = False


# Global settings instance
settings = Settings()
