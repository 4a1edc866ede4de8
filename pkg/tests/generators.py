"""Synthetic modules for property and memoization tests."""

from __future__ import annotations

from hypothesis import strategies as st


def memo_family_module(mids: int = 4, leaves: int = 5) -> str:
    """main -> mid_i -> leaf_i_j; every leaf writes at a tainted offset."""
    out = ["declare i64 @fread(ptr, i64, i64, ptr)", ""]
    for i in range(mids):
        for j in range(leaves):
            out += [
                f"define void @leaf_{i}_{j}(ptr %d, i32 %x) {{",
                "entry:",
                "  %off = sext i32 %x to i64",
                "  %q = getelementptr i8, ptr %d, i64 %off",
                "  store i8 1, ptr %q",
                "  ret void",
                "}", "",
            ]
        out += [f"define void @mid_{i}(ptr %d, i32 %x) {{", "entry:"]
        out += [f"  call void @leaf_{i}_{j}(ptr %d, i32 %x)" for j in range(leaves)]
        out += ["  ret void", "}", ""]
    out += [
        "define i32 @main() {",
        "entry:",
        "  %dst = alloca [64 x i8]",
        "  %cell = alloca i32",
        "  %n = call i64 @fread(ptr %cell, i64 4, i64 1, ptr null)",
        "  %v = load i32, ptr %cell",
    ]
    out += [f"  call void @mid_{i}(ptr %dst, i32 %v)" for i in range(mids)]
    out += ["  ret i32 0", "}", ""]
    return "\n".join(out)


@st.composite
def straight_line_modules(draw, max_functions: int = 4, max_statements: int = 7, globals_: int = 2) -> str:
    """Branch-free modules mixing sources, globals, calls, returns and GEP sinks.

    Every function has signature ``i32 (i32 %a, ptr %p)``.
    """
    nfn = draw(st.integers(1, max_functions))
    names = [f"f{i}" for i in range(nfn)]
    lines = [f"@g{k} = global i32 0" for k in range(globals_)]
    lines += ["", "declare i64 @fread(ptr, i64, i64, ptr)", ""]
    for name in names:
        body = ["entry:"]
        ints = ["%a"]
        n = draw(st.integers(1, max_statements))
        for k in range(n):
            kind = draw(st.sampled_from(["source", "gstore", "gload", "add", "call", "sink"]))
            x = draw(st.sampled_from(ints))
            if kind == "source":
                body += [f"  %b{k} = alloca i32", f"  %n{k} = call i64 @fread(ptr %b{k}, i64 4, i64 1, ptr null)",
                         f"  %s{k} = load i32, ptr %b{k}"]
                ints.append(f"%s{k}")
            elif kind == "gstore":
                body.append(f"  store i32 {x}, ptr @g{draw(st.integers(0, globals_ - 1))}")
            elif kind == "gload":
                body.append(f"  %l{k} = load i32, ptr @g{draw(st.integers(0, globals_ - 1))}")
                ints.append(f"%l{k}")
            elif kind == "add":
                body.append(f"  %z{k} = add i32 {x}, 1")
                ints.append(f"%z{k}")
            elif kind == "call":
                callee = draw(st.sampled_from(names))
                body.append(f"  %r{k} = call i32 @{callee}(i32 {x}, ptr %p)")
                ints.append(f"%r{k}")
            else:
                body += [f"  %e{k} = sext i32 {x} to i64", f"  %q{k} = getelementptr i8, ptr %p, i64 %e{k}",
                         f"  store i8 0, ptr %q{k}"]
        body.append(f"  ret i32 {draw(st.sampled_from(ints))}")
        lines += [f"define i32 @{name}(i32 %a, ptr %p) {{"] + body + ["}", ""]
    return "\n".join(lines)
