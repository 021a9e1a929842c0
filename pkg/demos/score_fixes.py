"""BLEU-4, exact match and the syntax filter on a few hand-written fixes."""

from advrepair import metrics

ROWS = [
    ("return new HiveQueryResultSet.Builder()",
     "return new HiveQueryResultSet.Builder(null)",
     "return new HiveQueryResultSet.Builder(null)"),
    ('detectDeadlock(e, "unlock");',
     'detectDeadlock(dbConn, e, "unlock" );',
     "detectDeadlock(dbConn, e, +++e);"),
    ("Utilities.clearWorkMap();",
     "Utilities.clearWorkMap(jconf);",
     "Utilities.clearWorkMap(jc);"),
    ("Processor childProcessor = routeContext.createProcessor(this);",
     "Processor childProcessor = this.createChildProcessor(routeContext, true);",
     "Processor childProcessor = this.createChildProcessor(routeContext, false);"),
]

for buggy, human, model in ROWS:
    verdict = metrics.syntax_filter(model)
    print(f"{model}\n    bleu4={metrics.bleu4(model, human):.4f}  filter={'pass' if verdict.passed else 'fail'}")

n, rate = metrics.exact_match([m for _, _, m in ROWS], [h for _, h, _ in ROWS])
print(f"\nexact match: {n}/{len(ROWS)} = {rate:.2f}")

# things the filter rejects
for bad in ("foo(a;", 'log("x);', "a ) b (", ""):
    print(repr(bad), [r.describe() for r in metrics.syntax_filter(bad).reasons])
