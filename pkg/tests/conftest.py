import pytest

_OUTCOMES = pytest.StashKey()


def _table(config):
    if _OUTCOMES not in config.stash:
        config.stash[_OUTCOMES] = {}
    return config.stash[_OUTCOMES]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        entry = _table(item.config).setdefault(mark.args[0], {"ok": True, "notes": []})
        if not rep.passed:
            entry["ok"] = False
        if rep.when == "call":
            entry["notes"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    table = _table(config)
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)
    for cid in sorted(table, key=key):
        e = table[cid]
        line = f"criterion {cid}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["notes"]:
            line += "  (" + "; ".join(e["notes"]) + ")"
        terminalreporter.write_line(line)
