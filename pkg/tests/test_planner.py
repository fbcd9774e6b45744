import pytest
from hypothesis import given, strategies as st

from kernelsmith.llm import ScriptedBackend
from kernelsmith.planner import fallback_plan, plan, validate_order
from kernelsmith.stages import DEFAULT_SEQUENCE, DEPENDENCY_EDGES, OPTIMIZATION_STAGES


def order_satisfies_constraints(order):
    index = {s: i for i, s in enumerate(order)}
    return all(
        index[b] < index[a]
        for b, a in DEPENDENCY_EDGES
        if b in index and a in index
    )


def test_unique_topological_order_for_chain():
    active = {"dtype_fix", "fusion", "gpu_specific", "autotune"}
    result = plan(active)
    assert result.ordered_stages == ["dtype_fix", "fusion", "gpu_specific", "autotune"]
    assert result.provenance == "fallback_default"


def test_empty_active_set():
    result = plan(set())
    assert result.ordered_stages == []
    assert result.skipped_stages == set(OPTIMIZATION_STAGES)


def test_full_set_no_llm_matches_default_sequence():
    result = plan(set(OPTIMIZATION_STAGES))
    assert result.ordered_stages == list(DEFAULT_SEQUENCE)


def test_active_outside_nine_stages_rejected():
    with pytest.raises(ValueError):
        plan({"analysis"})


def test_validate_order_violation_names_edge():
    ok, violation = validate_order(["fusion", "dtype_fix"])
    assert not ok
    assert "dtype_fix" in violation and "fusion" in violation


def test_validate_order_trivial_cases():
    assert validate_order([]) == (True, None)
    assert validate_order(["gpu_specific", "autotune"])[0] is True
    assert validate_order(["x"])[0] is False
    assert validate_order(["fusion", "fusion"])[0] is False


def test_llm_proposal_accepted_when_valid():
    active = {"dtype_fix", "fusion"}
    result = plan(active, llm=ScriptedBackend(["dtype_fix, fusion"]))
    assert result.ordered_stages == ["dtype_fix", "fusion"]
    assert result.provenance == "llm"


def test_llm_constraint_violation_falls_back():
    active = {"dtype_fix", "fusion"}
    result = plan(active, llm=ScriptedBackend(["fusion, dtype_fix"]))
    assert result.ordered_stages == ["dtype_fix", "fusion"]
    assert result.provenance == "fallback_default"


def test_llm_non_permutation_falls_back():
    active = {"dtype_fix", "fusion"}
    for proposal in ("dtype_fix", "dtype_fix, fusion, autotune", "dtype_fix, mystery"):
        result = plan(active, llm=ScriptedBackend([proposal]))
        assert result.provenance == "fallback_default"
        assert result.ordered_stages == ["dtype_fix", "fusion"]


def test_llm_failure_falls_back():
    result = plan({"fusion"}, llm=ScriptedBackend([]))
    assert result.ordered_stages == ["fusion"]
    assert result.provenance == "fallback_default"


def test_plan_idempotent_without_llm():
    active = {"memory_access", "block_pointers", "autotune"}
    assert plan(active).ordered_stages == plan(active).ordered_stages


def test_all_512_subsets_sound():
    stages = list(DEFAULT_SEQUENCE)
    for bits in range(2 ** len(stages)):
        active = {s for i, s in enumerate(stages) if bits & (1 << i)}
        result = plan(active)
        assert sorted(result.ordered_stages) == sorted(active)
        assert order_satisfies_constraints(result.ordered_stages)
        assert result.skipped_stages == OPTIMIZATION_STAGES - active


@given(st.sets(st.sampled_from(sorted(OPTIMIZATION_STAGES))))
def test_fallback_restriction_property(active):
    order = fallback_plan(active)
    assert sorted(order) == sorted(active)
    assert order_satisfies_constraints(order)
    assert validate_order(order) == (True, None)


@given(
    active=st.sets(st.sampled_from(sorted(OPTIMIZATION_STAGES)), min_size=1),
    proposal=st.lists(
        st.sampled_from(sorted(OPTIMIZATION_STAGES) + ["analysis", "junk", ""]),
        max_size=12,
    ),
)
def test_any_llm_proposal_yields_valid_plan(active, proposal):
    llm = ScriptedBackend([", ".join(proposal)])
    result = plan(active, llm=llm)
    assert validate_order(result.ordered_stages) == (True, None)
    assert sorted(result.ordered_stages) == sorted(active)
