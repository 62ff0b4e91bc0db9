"""The verification suite itself: coverage, passing, negative control."""

from recmoe.gradcheck import THRESHOLD, format_report, run_suite

EXPECTED_OPS = {
    "add_mul_div",
    "exp_log_sqrt_tanh",
    "power",
    "sum_mean",
    "matmul",
    "matmul_batched",
    "softmax",
    "layernorm",
    "gelu",
    "logsumexp",
    "reshape_transpose",
    "concat_narrow",
    "index_select",
    "modulate",
    "mmdit_attention",
    "mmdit_block",
    "lora_apply",
    "routing_soft",
    "recursion",
}


def test_suite_passes_and_covers_each_op_once():
    results = run_suite(seed=0)
    ops = [r.op for r in results]
    assert sorted(ops) == sorted(set(ops)), "an op was checked twice"
    assert set(ops) == EXPECTED_OPS
    for r in results:
        assert r.passed, f"{r.op} failed with max_rel={r.max_rel_err}"
        assert r.max_rel_err < THRESHOLD


def test_corrupted_gradient_fails_with_named_op():
    results = run_suite(seed=0, corrupt="lora_apply")
    failed = [r.op for r in results if not r.passed]
    assert failed == ["lora_apply"]
    report = format_report(results)
    assert "FAIL" in report and "lora_apply" in report


def test_report_mentions_every_op():
    results = run_suite(seed=1)
    report = format_report(results)
    for op in EXPECTED_OPS:
        assert op in report
