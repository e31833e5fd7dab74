TokenIds = tuple[int, ...]
LabelId = int
