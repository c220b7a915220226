# tests/conftest.py

import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="运行耗时的验收测试（参数扫描表、20000 次迭代的停滞实验）")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时的验收测试，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    """测试中不读写工作目录下的归档数据库。"""
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def archive_db(monkeypatch, tmp_path):
    """把实验归档指向临时 SQLite 文件。"""
    from sqlalchemy import create_engine
    from sqlalchemy.orm import sessionmaker

    from app import models  # noqa: F401
    from app.database import Base
    from app.services import experiment_runner

    engine = create_engine(f"sqlite:///{tmp_path / 'archive.db'}", connect_args={"check_same_thread": False})
    Base.metadata.create_all(bind=engine)
    monkeypatch.setattr(experiment_runner, "SessionLocal", sessionmaker(autocommit=False, autoflush=False, bind=engine))
    monkeypatch.setattr(experiment_runner, "init_db", lambda: None)
    yield engine
    engine.dispose()
