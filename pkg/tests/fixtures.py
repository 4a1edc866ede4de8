"""Small hand-written IR snippets shared by several test files."""

CONSTANT_INDEX_TEXT = """
@g_len = global i32 0

declare i64 @fread(ptr, i64, i64, ptr)

define i32 @read_len(ptr %f) {
entry:
  %buf = alloca i32
  %n = call i64 @fread(ptr %buf, i64 4, i64 1, ptr %f)
  %v = load i32, ptr %buf
  store i32 %v, ptr @g_len
  ret i32 %v
}

define void @use_len(ptr %dst) {
entry:
  %len = load i32, ptr @g_len
  %p = getelementptr i8, ptr %dst, i64 3
  store i8 0, ptr %p
  ret void
}
"""

SAME_FUNCTION = """
declare i64 @read(i32, ptr, i64)

define void @f() {
entry:
  %buf = alloca [8 x i8]
  %c = alloca i32
  %n = call i64 @read(i32 0, ptr %c, i64 4)
  %v = load i32, ptr %c
  %i = zext i32 %v to i64
  %p = getelementptr [8 x i8], ptr %buf, i64 0, i64 %i
  store i8 0, ptr %p
  ret void
}
"""
