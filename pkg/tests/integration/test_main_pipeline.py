# tests/integration/test_main_pipeline.py

import json
import runpy
import sys

import pytest

import main as main_module

CONFIG = """\
# small but statistically valid run
model = fbm
hurst = 0.25
grid_n = 8
paths = 2000
seed = 13
chunk_size = 512
quadrature_nodes = 16
grid_sizes = 4, 8
functional = linear
"""


@pytest.mark.integration
def test_main_runs_a_subcommand(tmp_path, monkeypatch):
    # 1) isolate the working directory; reports go to ./reports by default
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv('ROUGHCALC_OUTPUT_DIR', raising=False)
    (tmp_path / 'run.cfg').write_text(CONFIG)
    monkeypatch.setattr(sys, 'argv', ['main.py', 'factorize', '--config', 'run.cfg'])

    # 2) main() exits with the experiment's code
    with pytest.raises(SystemExit) as excinfo:
        main_module.main()
    assert excinfo.value.code == 0

    # 3) the report bundle lands in ./reports
    document = json.loads((tmp_path / 'reports' / 'factorization_fbm_0.25_8_13.json').read_text())
    assert document['experiment'] == 'factorization'
    assert document['config']['grid_sizes'] == [4, 8]
    assert document['config']['functional'] == 'linear'
    assert document['criteria'] == {}
    assert (tmp_path / 'reports' / 'factorization_fbm_0.25_8_13.csv').exists()


@pytest.mark.integration
def test_main_entry_point_runs_main(tmp_path, monkeypatch, capsys):
    """
    Execute main.py as a script (so that the
    `if __name__ == '__main__': main()` branch is covered).
    """
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(sys, 'argv', ['main.py', 'list'])
    sys.modules.pop('main', None)

    with pytest.raises(SystemExit) as excinfo:
        runpy.run_module('main', run_name="__main__", alter_sys=True)
    assert excinfo.value.code == 0
    assert 'Functionals:' in capsys.readouterr().out
