# app/models.py

from sqlalchemy import JSON, Column, DateTime, Integer, String, Text
from sqlalchemy.sql import func

from .database import Base


class ExperimentRun(Base):
    """
    实验归档表：记录一次命令行实验的配置、状态与结果摘要
    """
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True, nullable=False)  # 子命令，如 solve / sweep
    run_name = Column(String, nullable=True)  # 用户自定义名称
    status = Column(String, default="processing", nullable=False)  # processing / completed / failed
    config_json = Column(JSON, nullable=True)  # 运行配置
    summary_json = Column(JSON, nullable=True)  # 结果摘要
    error_message = Column(Text, nullable=True)  # 失败时的错误信息
    created_at = Column(DateTime(timezone=True), server_default=func.now())  # 创建时间
    updated_at = Column(DateTime(timezone=True), onupdate=func.now())  # 最后更新时间
