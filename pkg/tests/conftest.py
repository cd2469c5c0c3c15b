ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    line = f"criterion {number:2d} {title}: {'PASS' if passed else 'FAIL'}"
    print(line + (f"  ({detail})" if detail else ""))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {title}: {'PASS' if ok else 'FAIL'}"
                                    + (f"  ({detail})" if detail else ""))
