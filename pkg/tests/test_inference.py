import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emma.inference import (
    READ,
    ActionTrace,
    default_max_len,
    extract_delays,
    offline_decode,
    run_emma_inference,
    wait_k_inference,
    write_trace,
)

from .scripted import ScriptedModel


def actions(trace):
    return "".join(a[0] for a in trace.actions)


def test_confident_heads_write_after_first_read():
    trace = run_emma_inference(ScriptedModel(lambda i, j: 0.99, eos_after=4), [5, 6, 7, 8, 9], 0.5)
    assert trace.delays == [1, 1, 1, 1]
    assert trace.finished and not trace.truncated


def test_hesitant_heads_fall_back_to_offline():
    src = [5, 6, 7, 8, 9]
    trace = run_emma_inference(ScriptedModel(lambda i, j: 0.01, eos_after=4), src, 0.5)
    assert trace.delays == [len(src)] * 4
    assert actions(trace) == "RRRRRWWWW"


def test_scripted_table_action_string():
    # write only once the head is two tokens ahead of the target
    model = ScriptedModel(lambda i, j: 0.9 if j >= i + 1 else 0.1, eos_after=3)
    trace = run_emma_inference(model, [5, 6, 7, 8], 0.5)
    assert actions(trace) == "RRWRWRW"
    assert trace.delays == [2, 3, 4]
    assert trace.tokens == [11, 12, 13]
    assert model.encoded == [1, 2, 3, 4]
    # EOS is emitted but not recorded as a write; the counter sees every emission
    assert trace.writes_counter == 4


def test_skipped_positions_are_not_revisited():
    # p is high only at j = 1 for the second token; by then the head has moved on
    model = ScriptedModel(lambda i, j: 0.9 if (i, j) in {(1, 2), (2, 1)} else 0.1, eos_after=2)
    trace = run_emma_inference(model, [5, 6, 7], 0.5)
    assert actions(trace) == "RRWRW"


def test_minimum_over_heads_decides():
    # the first head sits just under the threshold, the others above it
    model = ScriptedModel(lambda i, j: 0.49, eos_after=2, heads=4)
    trace = run_emma_inference(model, [5, 6, 7], 0.5)
    assert trace.delays == [3, 3]


def test_truncation_is_flagged():
    model = ScriptedModel(lambda i, j: 0.99, eos_after=100)
    trace = run_emma_inference(model, [5, 6], 0.5, max_len=3)
    assert trace.truncated and not trace.finished
    assert len(trace.tokens) == 3
    assert default_max_len(4) == 18


def test_threshold_must_be_open_interval():
    model = ScriptedModel(lambda i, j: 0.5)
    for t in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            run_emma_inference(model, [5], t)


@given(st.lists(st.floats(0.0, 1.0), min_size=12, max_size=12), st.integers(1, 6))
def test_first_write_delay_monotone_in_threshold(table, xlen):
    model = ScriptedModel(lambda i, j: table[(i * 5 + j) % 12], eos_after=3)
    src = list(range(5, 5 + xlen))
    firsts = []
    for t in (0.2, 0.4, 0.5, 0.6, 0.7, 0.9):
        trace = run_emma_inference(model, src, t)
        firsts.append(trace.delays[0])
    assert firsts == sorted(firsts)


@given(st.lists(st.floats(0.0, 1.0), min_size=12, max_size=12), st.integers(1, 6), st.floats(0.05, 0.95))
def test_trace_validity(table, xlen, t):
    model = ScriptedModel(lambda i, j: table[(i * 7 + j) % 12], eos_after=4)
    trace = run_emma_inference(model, list(range(5, 5 + xlen)), t)
    delays = extract_delays(trace)
    assert delays == sorted(delays)
    assert delays == trace.delays
    assert all(1 <= d <= xlen for d in delays)
    assert sum(1 for a in trace.actions if a[0] == READ) <= xlen
    assert trace.actions[0][0] == READ


def test_near_one_threshold_is_offline():
    model = ScriptedModel(lambda i, j: 0.8, eos_after=3)
    src = [5, 6, 7, 8]
    assert run_emma_inference(model, src, 0.99).delays == [4, 4, 4]


def test_wait_k_examples():
    model = ScriptedModel(lambda i, j: 0.0, eos_after=4)
    assert wait_k_inference(model, [5, 6, 7, 8], 2).delays == [2, 3, 4, 4]
    assert wait_k_inference(model, [5, 6, 7, 8], 4).delays == [4, 4, 4, 4]
    assert wait_k_inference(model, [5, 6, 7, 8], 9).delays == [4, 4, 4, 4]
    assert wait_k_inference(model, [5, 6, 7, 8], 4).tokens == offline_decode(model, [5, 6, 7, 8])
    with pytest.raises(ValueError):
        wait_k_inference(model, [5], 0)


def test_extract_delays_examples():
    trace = ActionTrace.from_lines("R\nW\t5\t1\nW\t6\t1\n")
    assert extract_delays(trace) == [1, 1]
    trace = ActionTrace.from_lines("R\nR\nW\t5\t2\nR\nW\t6\t3\n")
    assert extract_delays(trace) == [2, 3]
    assert extract_delays(trace, chunk_seconds=0.5) == [1.0, 1.5]


def test_trace_files(tmp_path):
    model = ScriptedModel(lambda i, j: 0.9 if j >= i + 1 else 0.1, eos_after=3)
    trace = run_emma_inference(model, [5, 6, 7, 8], 0.5)
    write_trace(tmp_path / "trace.txt", trace, threshold=0.5)
    text = (tmp_path / "trace.txt").read_text()
    assert text.splitlines() == ["R", "R", "W\t11\t2", "R", "W\t12\t3", "R", "W\t13\t4"]
    assert ActionTrace.from_lines(text).actions == trace.actions
    summary = json.loads((tmp_path / "trace.txt.json").read_text())
    assert summary == {"source_length": 4, "output": [11, 12, 13], "delays": [2, 3, 4], "threshold": 0.5,
                       "truncated": False}


def test_bad_trace_line():
    with pytest.raises(ValueError):
        ActionTrace.from_lines("X\t1\t2\n")


def test_offline_decode_stops_at_eos():
    model = ScriptedModel(lambda i, j: 0.0, eos_after=2)
    assert offline_decode(model, [5, 6, 7]) == [11, 12]
    assert np.all(np.array(model.encoded) == 3)
