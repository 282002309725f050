import argparse
import logging
import os
import sys
from typing import List, Optional

from modules.config import (
    RUN_KEYS,
    SCENARIO_FLAG_KEYS,
    Settings,
    load_scenario,
    load_settings,
    parse_methods,
)
from modules.data_io import read_dataset, write_dataset
from modules.dgp import assemble, truth_record
from modules.diagnostics import check_assumptions, lemma_check, martingale_calibration
from modules.errors import AcceptanceFailure, ConfigError, RandSEError
from modules.linmodel import fit_2sls, fit_ols
from modules.montecarlo import acceptance_checks, cluster_ids_for, run_scenario
from modules.presets import get_preset, list_presets
from modules.report import (
    estimate_rows,
    format_table,
    render_checks,
    render_scenario,
    write_document,
    write_estimate_outputs,
    write_scenario_outputs,
)
from modules.rng import replication_seed
from modules.variance import VarianceMethod, ci, default_bandwidth, estimate_all

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ACCEPTANCE = 3

# lemma-check --assert 的容差
LEMMA_MEAN_BAND = (0.97, 1.03)
LEMMA_MIN_SHARE = 0.95


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """参数错误抛出异常而不是直接退出，由 main 统一映射为退出码 1"""

    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ 子命令

def _layer_flags(args) -> dict:
    """专用命令行参数 -> 配置键（优先级最高）；未给出的参数不参与覆盖"""
    flags = {}
    for key in SCENARIO_FLAG_KEYS + RUN_KEYS:
        value = getattr(args, key, None)
        if value is True:
            flags[key] = "true"
        elif value is not None and value is not False:
            flags[key] = str(value)
    return flags


def _default_replications(name: str) -> int:
    try:
        return get_preset(name).R
    except ConfigError:
        return 1000


def cmd_simulate(args, settings: Settings) -> int:
    spec, run, layers = load_scenario(args.preset, args.config, args.set, _layer_flags(args))
    R = run.R if run.R is not None else _default_replications(spec.name)
    out_dir = run.out or settings.out_dir
    ci_dist = "t" if run.t_crit else "normal"
    parallelism = run.parallelism or settings.threads

    result = run_scenario(spec, R, run.seed, parallelism, ci_dist)
    print(render_scenario(result, layers))

    checks = None
    if run.acceptance:
        checks = acceptance_checks(result, truth_record(spec), get_preset(spec.name))
        print()
        print(render_checks(checks))
    write_scenario_outputs(result, out_dir, run.write_replications, checks)

    if run.dump_data:
        data, _ = assemble(spec, replication_seed(run.seed, 0))
        cluster_ids = cluster_ids_for(spec, data) if spec.cluster_by != "group" else None
        write_dataset(data, os.path.join(out_dir, f"{spec.name}_rep0.csv"), cluster_ids)

    if checks is not None:
        failures = [c for c in checks if not c[4]]
        if failures:
            raise AcceptanceFailure(failures)
    return EXIT_OK


def _default_methods(data, cluster_ids) -> List[str]:
    methods = ["Classic", "HC0", "HC1", "HacNW"]
    if cluster_ids is not None:
        methods += ["ClusterLZ", "Moulton"]
    if data.V is not None:
        methods.append("Tsls")
    return methods


def _estimate_methods(args, data, cluster_ids) -> List[VarianceMethod]:
    """解析 --methods 并检查数据是否具备所需的列"""
    if args.methods is None:
        return [VarianceMethod.parse(m) for m in _default_methods(data, cluster_ids)]
    methods = [VarianceMethod(m) for m in parse_methods("--methods", args.methods)]
    if not methods:
        raise ConfigError("--methods 不能为空")
    clustered = {VarianceMethod.CLUSTER_LZ, VarianceMethod.MOULTON}
    if cluster_ids is None and clustered.intersection(methods):
        raise ConfigError("ClusterLZ / Moulton 需要数据中有 cluster 或 group 列")
    if data.V is None and VarianceMethod.TSLS in methods:
        raise ConfigError("Tsls 需要数据中有 v 列")
    return methods


def cmd_estimate(args, settings: Settings) -> int:
    data, cluster_ids = read_dataset(args.data)
    methods = _estimate_methods(args, data, cluster_ids)

    fit = fit_ols(data, dof_correction=args.dof_correction)
    tsls = fit_2sls(data) if VarianceMethod.TSLS in methods else None
    bandwidth = args.bandwidth if args.bandwidth is not None else default_bandwidth(data.n)
    estimates = estimate_all(
        fit,
        data,
        methods,
        cluster_ids=cluster_ids,
        bandwidth=bandwidth,
        cluster_adjust=args.cluster_adjust,
        tsls_fit=tsls,
    )
    level = args.level if args.level is not None else 0.95
    dist = "t" if args.t_crit else "normal"
    df = data.n - 1 - data.d_w
    intervals = {m: ci(beta, est, level, dist, df) for m, (beta, est) in estimates.items()}
    rows = estimate_rows(estimates, level, intervals)

    print(f"数据: {args.data}  n={data.n}  d_w={data.d_w}  HAC 带宽={bandwidth}")
    print(format_table(rows))
    name = os.path.splitext(os.path.basename(args.data))[0]
    extra = {"data": args.data, "n": data.n, "d_w": data.d_w, "hac_bandwidth": bandwidth}
    write_estimate_outputs(rows, args.out or settings.out_dir, name, extra)
    return EXIT_OK


def cmd_diagnose(args, settings: Settings) -> int:
    spec = None
    seed = args.seed or 0
    out_dir = args.out or settings.out_dir
    if args.data:
        data, _ = read_dataset(args.data)
        name = os.path.splitext(os.path.basename(args.data))[0]
    else:
        if not (args.preset or args.config):
            raise UsageError("diagnose 需要 --data、--preset 或 --config 之一")
        spec, run, _ = load_scenario(args.preset, args.config, args.set, _layer_flags(args))
        seed = run.seed
        out_dir = run.out or out_dir
        data, _ = assemble(spec, replication_seed(seed, 0))
        name = spec.name

    report = check_assumptions(data, args.max_lag)
    summary = [{
        "lambda_min_w": report.lambda_min_w,
        "has_constant": report.has_constant,
        "d_mean": report.d_moments[0],
        "d_var": report.d_moments[1],
        "d_m4": report.d_moments[2],
        "flags": ",".join(report.flags) or "-",
    }]
    print(format_table(summary))
    if report.martingale_stats:
        print()
        print(format_table([
            {"lag": h, "statistic": s, "se": se, "ratio": s / se if se > 0 else 0.0}
            for h, s, se in report.martingale_stats
        ]))
    document = report.to_dict()
    if spec is not None and args.calibration_seeds > 0:
        calibration = martingale_calibration(spec, args.calibration_seeds, args.max_lag, seed)
        print(f"\n误报率 (|stat| > 3·se): {calibration['rate']:.4f}")
        document["calibration"] = calibration
    write_document(document, out_dir, f"{name}_diagnostics.json")
    return EXIT_OK


def cmd_lemma_check(args, settings: Settings) -> int:
    summary = lemma_check(args.rho, args.n, args.seeds, args.seed, demean=args.demean)
    shown = {k: v for k, v in summary.items() if k != "ratios"}
    print(format_table([shown]))
    write_document(summary, args.out or settings.out_dir, f"lemma_rho{args.rho}_n{args.n}.json")
    if args.acceptance:
        checks = [
            ("mean_ratio", summary["mean"], LEMMA_MEAN_BAND[0], LEMMA_MEAN_BAND[1],
             LEMMA_MEAN_BAND[0] <= summary["mean"] <= LEMMA_MEAN_BAND[1]),
            ("share_in_band", summary["share_in_band"], LEMMA_MIN_SHARE, 1.0,
             summary["share_in_band"] >= LEMMA_MIN_SHARE),
        ]
        print()
        print(render_checks(checks))
        failures = [c for c in checks if not c[4]]
        if failures:
            raise AcceptanceFailure(failures)
    return EXIT_OK


def cmd_list_presets(args, settings: Settings) -> int:
    rows = [
        {"name": p.name, "n": p.spec.n, "R": p.R, "methods": ",".join(p.spec.methods),
         "description": p.description}
        for p in list_presets()
    ]
    print(format_table(rows))
    return EXIT_OK


# ------------------------------------------------------------------ 参数

def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="预设场景名（见 list-presets）")
    p.add_argument("--config", help="场景配置文件（key=value）")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="覆盖场景键，可重复，如 --set error0.rho=0.5")
    p.add_argument("--n", type=int, help="样本量（覆盖场景的 n）")
    p.add_argument("--level", type=float, help="置信水平（覆盖场景的 level）")
    p.add_argument("--seed", type=int, help="基础随机种子（默认 0）")


def _add_estimator_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--methods", help="逗号分隔的方差估计方法：Classic,HC0,HC1,ClusterLZ,Moulton,HacNW,Tsls")
    p.add_argument("--cluster-adjust", action="store_true", help="聚类估计量乘小样本校正因子")
    p.add_argument("--t-crit", action="store_true", help="置信区间使用 t(n-1-d_w) 临界值")


def build_parser(settings: Settings) -> CliParser:
    parser = CliParser(prog="randse", description="随机化实验下回归标准误的估计与 Monte Carlo 检验")
    parser.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)
    sub.required = True

    p = sub.add_parser("simulate", help="对场景做 Monte Carlo 模拟")
    _add_scenario_args(p)
    _add_estimator_args(p)
    p.add_argument("--R", type=int, help="重复次数（预设默认 4000，其它 1000）")
    p.add_argument("--parallelism", type=int,
                   help="并行线程数（默认取 RANDSE_THREADS）")
    p.add_argument("--out", help="输出目录（默认取 RANDSE_OUT_DIR）")
    p.add_argument("--assert", dest="acceptance", action="store_true",
                   help="验收模式：容差不满足时以退出码 3 结束")
    p.add_argument("--write-replications", action="store_true", help="写出逐次重复的 CSV")
    p.add_argument("--dump-data", action="store_true", help="写出第 0 次重复的数据集")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("estimate", help="对 CSV 数据计算各种标准误")
    p.add_argument("--data", required=True, help="CSV 文件（列 y,d[,v,group,cluster,const,w1,w2,...]）")
    _add_estimator_args(p)
    p.add_argument("--bandwidth", type=int, help="HAC 带宽（默认 floor(4(n/100)^(2/9))）")
    p.add_argument("--level", type=float, help="置信水平（默认 0.95）")
    p.add_argument("--dof-correction", action="store_true", help="s² 除以 n-1-d_w")
    p.add_argument("--out", help="输出目录")
    p.set_defaults(handler=cmd_estimate)

    p = sub.add_parser("diagnose", help="假设诊断与鞅差检查")
    p.add_argument("--data", help="CSV 文件；不给出时按场景生成一份数据")
    _add_scenario_args(p)
    p.add_argument("--max-lag", type=int, default=10, help="鞅差检查的最大滞后阶数")
    p.add_argument("--calibration-seeds", type=int, default=0, help="多种子误报率校准的种子数")
    p.add_argument("--out", help="输出目录")
    p.set_defaults(handler=cmd_diagnose)

    p = sub.add_parser("lemma-check", help="AR(1) 自协方差下的方差比检查")
    p.add_argument("--rho", type=float, required=True, help="AR(1) 系数")
    p.add_argument("--n", type=int, required=True, help="样本量")
    p.add_argument("--seeds", type=int, default=200, help="种子数")
    p.add_argument("--seed", type=int, default=0, help="基础随机种子")
    p.add_argument("--demean", action="store_true", help="先对 d 去均值")
    p.add_argument("--assert", dest="acceptance", action="store_true", help="验收模式")
    p.add_argument("--out", help="输出目录")
    p.set_defaults(handler=cmd_lemma_check)

    p = sub.add_parser("list-presets", help="列出预设场景")
    p.set_defaults(handler=cmd_list_presets)
    return parser


def _configure_logging(level_name: str, verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, level_name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        settings = load_settings()
        args = build_parser(settings).parse_args(argv)
    except (UsageError, ConfigError) as e:
        print(f"用法错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    _configure_logging(settings.log_level, args.verbose)
    try:
        return args.handler(args, settings)
    except AcceptanceFailure as e:
        print(f"验收失败: {e}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except (UsageError, ConfigError) as e:
        print(f"用法错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RandSEError as e:
        logger.debug("详细错误", exc_info=True)
        print(f"错误 [{type(e).__name__}]: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
