# app/core/config.py

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # 通过 model_config 指定从 .env 文件读取，环境变量统一使用 OSM_ 前缀
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="OSM_",
        extra="ignore",
    )

    # 实验归档数据库
    DATABASE_URL: str = "sqlite:///./osm_experiments.db"

    # 实验默认参数
    DEFAULT_SEED: int = 42
    SWEEP_WORKERS: int = 0  # 0 表示串行执行扫描

    # 子区域线性求解
    SOLVER: str = "auto"  # auto / cholesky / lu / cg
    DENSE_SOLVER_LIMIT: int = 1500  # 不超过该维数的子区域系统使用稠密 Cholesky

    # 日志级别（命令行入口统一配置）
    LOG_LEVEL: str = "WARNING"

    # 是否允许 50x50 / 100x100 的大网格扫描
    LARGE_GRIDS: bool = False


# 创建一个全局可用的配置实例
settings = Settings()
