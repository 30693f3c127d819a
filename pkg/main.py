"""SynthOverlap command line: build overlapped-speech datasets and score separation.

    python main.py --config run.yaml segment --annotations ann.tsv --recordings rec.tsv -o segs.tsv
    python main.py verify --segments segs.tsv --recordings rec.tsv --threshold 0.5 -o kept.tsv
    python main.py extract --segments kept.tsv --recordings rec.tsv --outdir utts
    python main.py pair --utterances utts/utterances.tsv --outdir lists
    python main.py mix --list lists/mix_2_spk_tt.txt --outdir wav8k
    python main.py separate --mixdir wav8k --outdir sep
    python main.py eval --refdir wav8k --estdir sep -o report.tsv
"""

import contextlib
import functools
import glob
import logging
import multiprocessing
import os
import sys

import click

from audio_io import read_wav
import mixer
import pairer
import segmenter
import separation
from config import load_config, resolve, stage_rng
from errors import ConfigError, SynthOverlapError
from manifest import write_manifest
from metrics import EvalReport, eval_files, write_report as write_eval_report
from seg_verify import enroll, read_scores, verify as verify_segments, write_report as write_verify_report
from stats import (corpus_stats, format_table, usage_stats, write_histogram,
                   write_speaker_histogram, write_tsv)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
INTERNAL_ERROR_EXIT = 3

logger = logging.getLogger(__name__)


class StageGroup(click.Group):
    """Command group whose usage errors exit with the config-error code."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = ConfigError.exit_code
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = ConfigError.exit_code
            raise


class RunContext:
    def __init__(self, config_path, seed, jobs):
        self.config_path = config_path
        self.seed_override = seed
        self.jobs_override = jobs
        self._config = None

    @property
    def config(self):
        if self._config is None:
            self._config = load_config(self.config_path)
            run = resolve(self._config, "run", seed=self.seed_override, jobs=self.jobs_override)
            if run["jobs"] < 1:
                raise ConfigError(f"jobs must be at least 1, got {run['jobs']}")
            self._config["run"] = run
        return self._config

    @property
    def seed(self):
        return self.config["run"]["seed"]

    @property
    def jobs(self):
        return self.config["run"]["jobs"]

    def rng(self, stage):
        return stage_rng(self.seed, stage)


def stage(name):
    """Run a subcommand body, mapping library errors to exit codes."""
    def decorator(fn):
        @functools.wraps(fn)
        @click.pass_obj
        def wrapper(run, **kwargs):
            try:
                return fn(run, **kwargs)
            except SynthOverlapError as e:
                logger.error(f"{name} failed: {e}")
                sys.exit(e.exit_code)
            except (click.exceptions.Exit, click.ClickException):
                raise
            except Exception:
                logger.exception(f"{name} failed with an internal error")
                sys.exit(INTERNAL_ERROR_EXIT)
        return wrapper
    return decorator


@contextlib.contextmanager
def worker_map(jobs):
    """Ordered map over a process pool, or the builtin map for one job."""
    if jobs <= 1:
        yield map
        return
    with multiprocessing.Pool(processes=jobs) as pool:
        yield pool.imap


def manifest_path(output, is_dir=False):
    return os.path.join(output, "manifest.json") if is_dir else f"{output}.manifest.json"


@click.group(cls=StageGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML config file.")
@click.option("--seed", type=int, default=None, help="Run seed (overrides run.seed).")
@click.option("--jobs", type=int, default=None, help="Worker processes for per-file stages.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings and errors only.")
@click.pass_context
def cli(ctx, config_path, seed, jobs, verbose, quiet):
    """Synthetic overlapped-speech dataset toolkit."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    ctx.obj = RunContext(config_path, seed, jobs)


@cli.command()
@click.option("--annotations", type=click.Path(), default=None, help="JSON or TSV speaker annotations.")
@click.option("--recordings", type=click.Path(), required=True, help="Recording table TSV.")
@click.option("--mode", type=click.Choice(["transcript", "energy"]), default=None)
@click.option("--sad/--no-sad", default=None, help="Refine regions with speech activity detection.")
@click.option("--sad-labels", type=click.Path(), default=None,
              help="Directory of <recording>.txt frame labels replacing the energy detector.")
@click.option("--min-length", "min_length_s", type=float, default=None)
@click.option("-o", "--output", type=click.Path(), required=True, help="Segment TSV to write.")
@stage("segment")
def segment(run, annotations, recordings, mode, sad, sad_labels, min_length_s, output):
    """Find single-speaker segments."""
    params = resolve(run.config, "segment", mode=mode, sad=sad, min_length_s=min_length_s)
    table = segmenter.read_recordings(recordings)

    regions = []
    if params["mode"] == "transcript":
        if annotations is None:
            raise ConfigError("transcript mode needs --annotations")
        grouped = segmenter.read_annotations(annotations)
        for rec in sorted(grouped):
            regions += segmenter.single_speaker_regions(grouped[rec], rec)
    else:
        by_recording = {}
        for entry in table.values():
            if entry.speaker:
                by_recording.setdefault(entry.recording, []).append(entry)
        for rec, entries in sorted(by_recording.items()):
            if len(entries) != 2:
                raise ConfigError(f"energy mode needs two speaker channels for {rec}, got {len(entries)}")
            a, b = sorted(entries, key=lambda e: e.speaker)
            wa = read_wav(a.path, channel=a.channel)
            wb = read_wav(b.path, channel=b.channel)
            for target, other, speaker in ((wa, wb, a.speaker), (wb, wa, b.speaker)):
                regions += segmenter.energy_regions(
                    target, other, params["energy_floor_db"], params["ratio_min_db"],
                    params["frame_s"], speaker=speaker, recording=rec)

    if params["sad"]:
        sad_params = segmenter.SadParams(
            frame_s=params["sad_frame_s"], step_s=params["sad_step_s"],
            on_db=params["sad_on_db"], off_db=params["sad_off_db"],
            abs_floor_db=params["sad_abs_floor_db"], hangover_s=params["hangover_s"],
            min_pause_s=params["min_pause_s"])
        groups = {}
        for region in regions:
            groups.setdefault((region.recording, region.speaker), []).append(region)
        jobs = []
        for (rec, speaker), group in sorted(groups.items()):
            labels = None
            if sad_labels:
                label_path = os.path.join(sad_labels, f"{rec}.txt")
                if os.path.exists(label_path):
                    labels = segmenter.read_frame_labels(label_path, params["sad_labels_step_s"])
                else:
                    logger.warning(f"No frame labels for {rec}, using the energy detector")
            jobs.append((segmenter.lookup_recording(table, rec, speaker), group, sad_params, labels))
        with worker_map(run.jobs) as pmap:
            regions = [seg for refined in pmap(segmenter.refine_recording, jobs) for seg in refined]

    segments = segmenter.length_filter(segmenter.sort_segments(regions), params["min_length_s"])
    segmenter.write_segments(output, segments)
    write_manifest(manifest_path(output), "segment", params, run.seed,
                   {"annotations": annotations, "recordings": recordings, "sad_labels": sad_labels})
    click.echo(f"{len(segments)} segments -> {output}")


@cli.command()
@click.option("--segments", type=click.Path(), required=True)
@click.option("--recordings", type=click.Path(), default=None, help="Needed unless --scores is given.")
@click.option("--threshold", type=float, default=None)
@click.option("--scores", type=click.Path(), default=None, help="External utt_id/score TSV.")
@click.option("--min-enroll", "min_enroll_s", type=float, default=None)
@click.option("-o", "--output", type=click.Path(), required=True, help="Kept segments TSV.")
@click.option("--report", type=click.Path(), default=None, help="Defaults to <output>.report.tsv.")
@stage("verify")
def verify(run, segments, recordings, threshold, scores, min_enroll_s, output, report):
    """Reject segments that do not match their speaker's profile."""
    params = resolve(run.config, "verify", threshold=threshold, min_enroll_s=min_enroll_s)
    segs = segmenter.read_segments(segments)

    if scores:
        external = read_scores(scores)
        pairs = [(seg, None) for seg in segs]
        profiles = {}
    else:
        if recordings is None:
            raise ConfigError("verify needs --recordings unless --scores is given")
        table = segmenter.read_recordings(recordings)
        cache = segmenter.RecordingCache()
        pairs = [(seg, cache.cut(segmenter.lookup_recording(table, seg.recording, seg.speaker), seg))
                 for seg in segs]
        external = None
        profiles = {}
        for speaker in sorted({seg.speaker for seg in segs}):
            own = [(seg, w) for seg, w in pairs if seg.speaker == speaker]
            profiles[speaker] = enroll(speaker, own, params["min_enroll_s"],
                                       params["window_len"], params["hop"])

    kept, rejected = verify_segments(profiles, pairs, params["threshold"], external,
                                     params["window_len"], params["hop"])
    report = report or f"{os.path.splitext(output)[0]}.report.tsv"
    segmenter.write_segments(output, [r.segment for r in kept])
    write_verify_report(report, kept, rejected)
    write_manifest(manifest_path(output), "verify", params, run.seed,
                   {"segments": segments, "recordings": recordings, "scores": scores})
    click.echo(f"kept {len(kept)}, rejected {len(rejected)} -> {output}")


@cli.command()
@click.option("--segments", type=click.Path(), required=True)
@click.option("--recordings", type=click.Path(), required=True,
              help="Recording table; point it at another channel for a parallel set.")
@click.option("--outdir", type=click.Path(file_okay=False), required=True)
@click.option("--rate", "sample_rate_hz", type=int, default=None)
@click.option("--float", "float_output", is_flag=True, default=None)
@stage("extract")
def extract(run, segments, recordings, outdir, sample_rate_hz, float_output):
    """Cut utterance WAVs out of recordings and write utterances.tsv."""
    params = resolve(run.config, "extract", sample_rate_hz=sample_rate_hz,
                     float_output=float_output or None)
    rows = segmenter.extract_utterances(segmenter.read_segments(segments),
                                        segmenter.read_recordings(recordings), outdir,
                                        params["sample_rate_hz"], params["float_output"])
    segmenter.write_utterance_table(os.path.join(outdir, "utterances.tsv"), rows)
    write_manifest(manifest_path(outdir, is_dir=True), "extract", params, run.seed,
                   {"segments": segments, "recordings": recordings})
    click.echo(f"{len(rows)} utterances -> {outdir}")


@cli.command()
@click.option("--utterances", type=click.Path(), required=True, help="Utterance table TSV.")
@click.option("-o", "--output", type=click.Path(), default=None, help="Single mixture list.")
@click.option("--outdir", type=click.Path(file_okay=False), default=None,
              help="Write speaker-disjoint mix_2_spk_{tr,cv,tt}.txt here.")
@click.option("--target", type=int, default=None, help="Mixtures in a single list.")
@click.option("--max-speakers", "max_train_speakers", type=int, default=None,
              help="Restrict training utterances to this many speakers.")
@click.option("--trace", type=click.Path(), default=None, help="Per-pair trace TSV.")
@stage("pair")
def pair(run, utterances, output, outdir, target, max_train_speakers, trace):
    """Generate mixture lists with balanced utterance usage."""
    if (output is None) == (outdir is None):
        raise ConfigError("give exactly one of --output or --outdir")
    params = resolve(run.config, "pair", target_train=target,
                     max_train_speakers=max_train_speakers)
    rng = run.rng("pair")
    utts = pairer.read_utterance_table(utterances)
    traces = [] if trace else None
    shuffle = rng if params["shuffle"] else None
    snr_range = (params["snr_low_db"], params["snr_high_db"])

    if output:
        if params["max_train_speakers"] is not None:
            utts = pairer.restrict_speakers(utts, params["max_train_speakers"], rng)
        mixes = pairer.generate_mixture_list(utts, params["target_train"], shuffle, traces)
        lists = {output: pairer.assign_snrs(mixes, rng, snr_range)}
    else:
        plan = pairer.split_speakers(
            {u.speaker for u in utts},
            (params["train_speakers"], params["cv_speakers"], params["test_speakers"]), rng)
        if params["max_train_speakers"] is not None:
            train = [u for u in utts if u.speaker in plan.train]
            keep = {u.speaker for u in pairer.restrict_speakers(train, params["max_train_speakers"], rng)}
            plan = pairer.SplitPlan(frozenset(keep), plan.cv, plan.test)
        targets = {"tr": params["target_train"], "cv": params["target_cv"], "tt": params["target_test"]}
        split_lists = pairer.generate_split_lists(utts, plan, targets, shuffle, traces)
        lists = {os.path.join(outdir, f"mix_2_spk_{name}.txt"): pairer.assign_snrs(mixes, rng, snr_range)
                 for name, mixes in split_lists.items()}

    for path, mixes in lists.items():
        pairer.write_mixture_list(path, mixes)
    if trace:
        pairer.write_trace(trace, traces)
    write_manifest(manifest_path(output) if output else manifest_path(outdir, is_dir=True),
                   "pair", params, run.seed, {"utterances": utterances})
    click.echo(f"{sum(len(m) for m in lists.values())} mixtures in {len(lists)} list(s)")


@cli.command()
@click.option("--list", "lists", type=click.Path(), multiple=True, required=True)
@click.option("--target", type=int, default=None, help="Sub-sample the combined list to this size.")
@click.option("-o", "--output", type=click.Path(), required=True)
@stage("combine")
def combine(run, lists, target, output):
    """Concatenate mixture lists, optionally sub-sampled in order."""
    mixes = pairer.combine_mixture_lists([pairer.read_mixture_list(p) for p in lists],
                                         target, run.rng("combine"))
    pairer.write_mixture_list(output, mixes)
    write_manifest(manifest_path(output), "combine", {"target": target}, run.seed, {"lists": list(lists)})
    click.echo(f"{len(mixes)} mixtures -> {output}")


@cli.command()
@click.option("--list", "mix_list", type=click.Path(), required=True, help="Mixture list.")
@click.option("--outdir", type=click.Path(file_okay=False), required=True)
@click.option("--mode", type=click.Choice(list(mixer.MODES)), default=None)
@click.option("--both", is_flag=True, default=None, help="Render min and max into <outdir>/{min,max}.")
@click.option("--float", "float_output", is_flag=True, default=None)
@click.option("--audio-root", type=click.Path(file_okay=False), default=None,
              help="Resolve relative utterance paths against this directory.")
@stage("mix")
def mix(run, mix_list, outdir, mode, both, float_output, audio_root):
    """Render mixture and source WAVs."""
    params = resolve(run.config, "mix", mode=mode, both=both or None,
                     float_output=float_output or None)
    mixes = pairer.read_mixture_list(mix_list)
    resolver = mixer.PathResolver(audio_root)
    activity = mixer.LabelActivity(resolver)

    layouts = [(m, os.path.join(outdir, m)) for m in mixer.MODES] if params["both"] \
        else [(params["mode"], outdir)]
    with worker_map(run.jobs) as pmap:
        for mode_name, target_dir in layouts:
            mixer.render_list(mixes, target_dir, resolver, mode_name, params["float_output"],
                              activity, map_fn=pmap)

    write_manifest(manifest_path(outdir, is_dir=True), "mix", params, run.seed,
                   {"list": mix_list, "audio_root": audio_root})
    click.echo(f"{len(mixes)} mixtures -> {outdir}")


def _names(directory):
    return sorted(os.path.splitext(os.path.basename(p))[0]
                  for p in glob.glob(os.path.join(directory, "*.wav")))


def _numbered_dirs(root, prefix):
    dirs = []
    while os.path.isdir(os.path.join(root, f"{prefix}{len(dirs) + 1}")):
        dirs.append(os.path.join(root, f"{prefix}{len(dirs) + 1}"))
    return dirs


@cli.command()
@click.option("--mixdir", type=click.Path(file_okay=False), required=True,
              help="Mixer output with mix/ and s1/, s2/, ...")
@click.option("--outdir", type=click.Path(file_okay=False), required=True)
@click.option("--mask", type=click.Choice(list(separation.MASK_KINDS)), default=None)
@click.option("--masks", "mask_dir", type=click.Path(file_okay=False), default=None,
              help="External <mixname>.bin mask tensors instead of oracle masks.")
@stage("separate")
def separate(run, mixdir, outdir, mask, mask_dir):
    """Oracle (or externally masked) separation of rendered mixtures."""
    params = resolve(run.config, "separate", mask=mask)
    source_dirs = _numbered_dirs(mixdir, "s")
    names = _names(os.path.join(mixdir, "mix"))
    if not names:
        raise ConfigError(f"no mixtures found in {os.path.join(mixdir, 'mix')}")
    if len(source_dirs) < 2:
        raise ConfigError(f"{mixdir} needs at least s1/ and s2/ reference directories")

    jobs = [(name, os.path.join(mixdir, "mix", f"{name}.wav"),
             [os.path.join(d, f"{name}.wav") for d in source_dirs], outdir, params["mask"],
             os.path.join(mask_dir, f"{name}.bin") if mask_dir else None,
             params["window_len"], params["hop"])
            for name in names]
    with worker_map(run.jobs) as pmap:
        rows = list(pmap(separation.separate_files, jobs))

    separation.write_log(os.path.join(outdir, "separation.tsv"), rows)
    write_manifest(manifest_path(outdir, is_dir=True), "separate", params, run.seed,
                   {"mixdir": mixdir, "masks": mask_dir})
    click.echo(f"{len(rows)} mixtures separated -> {outdir}")


@cli.command(name="eval")
@click.option("--refdir", type=click.Path(file_okay=False), required=True,
              help="Mixer output with mix/ and s1/, s2/, ...")
@click.option("--estdir", type=click.Path(file_okay=False), required=True,
              help="Estimates in est1/, est2/, ...")
@click.option("-o", "--output", type=click.Path(), required=True)
@click.option("--csv", "csv_format", is_flag=True, default=None)
@stage("eval")
def evaluate(run, refdir, estdir, output, csv_format):
    """SI-SDR and SDR improvement per mixture."""
    params = resolve(run.config, "eval", csv=csv_format or None)
    ref_dirs = _numbered_dirs(refdir, "s")
    est_dirs = _numbered_dirs(estdir, "est")
    if len(ref_dirs) != len(est_dirs):
        raise ConfigError(f"{len(ref_dirs)} reference but {len(est_dirs)} estimate directories")
    if not est_dirs:
        raise ConfigError(f"no est1/ directory in {estdir}")
    names = _names(est_dirs[0])

    jobs = [(name, [os.path.join(d, f"{name}.wav") for d in ref_dirs],
             [os.path.join(d, f"{name}.wav") for d in est_dirs],
             os.path.join(refdir, "mix", f"{name}.wav"))
            for name in names]
    with worker_map(run.jobs) as pmap:
        report = EvalReport(list(pmap(eval_files, jobs)))

    write_eval_report(output, report, params["csv"])
    write_manifest(manifest_path(output), "eval", params, run.seed,
                   {"refdir": refdir, "estdir": estdir})
    summary = report.aggregate()
    click.echo(f"{summary['count']} mixtures, mean SDRi {summary['mean']:.2f} dB "
               f"(median {summary['median']:.2f}, std {summary['std']:.2f})")


@cli.command()
@click.option("--segments", type=click.Path(), multiple=True, help="Segment TSV (repeatable).")
@click.option("--utterances", type=click.Path(), multiple=True, help="Utterance table (repeatable).")
@click.option("--mixtures", type=click.Path(), multiple=True, help="Mixture list (repeatable).")
@click.option("--universe", type=click.Path(), default=None,
              help="Utterance table whose unused utterances count as usage 0.")
@click.option("-o", "--output", type=click.Path(), required=True, help="Statistics TSV.")
@click.option("--histogram", type=click.Path(), default=None,
              help="Usage histogram TSV of the last mixture list.")
@click.option("--speaker-histogram", type=click.Path(), default=None,
              help="Per-speaker usage histogram TSV of the last mixture list.")
@stage("stats")
def stats(run, segments, utterances, mixtures, universe, output, histogram, speaker_histogram):
    """Dataset statistics table, one row per input."""
    entries = []
    for path in segments:
        entries.append((os.path.basename(path), corpus_stats(segmenter.read_segments(path)), None))
    for path in utterances:
        entries.append((os.path.basename(path), corpus_stats(pairer.read_utterance_table(path)), None))
    refs = [u.ref for u in pairer.read_utterance_table(universe)] if universe else None
    usage = None
    for path in mixtures:
        usage = usage_stats(pairer.read_mixture_list(path), refs)
        entries.append((os.path.basename(path), None, usage))
    if not entries:
        raise ConfigError("stats needs at least one --segments, --utterances or --mixtures input")

    click.echo(format_table(entries), nl=False)
    write_tsv(output, entries)
    if histogram:
        if usage is None:
            raise ConfigError("--histogram needs a --mixtures input")
        write_histogram(histogram, usage)
    if speaker_histogram:
        if usage is None:
            raise ConfigError("--speaker-histogram needs a --mixtures input")
        write_speaker_histogram(speaker_histogram, usage)
    write_manifest(manifest_path(output), "stats", resolve(run.config, "stats"), run.seed,
                   {"segments": list(segments), "utterances": list(utterances),
                    "mixtures": list(mixtures), "universe": universe})


@cli.command()
@click.option("--list", "mix_list", type=click.Path(), required=True)
@click.option("--rule", "rules", multiple=True, help="pattern=replacement, first match wins (repeatable).")
@click.option("-o", "--output", type=click.Path(), required=True)
@stage("retarget")
def retarget(run, mix_list, rules, output):
    """Rewrite utterance paths to another synchronized channel."""
    params = resolve(run.config, "retarget", rules=list(rules) or None)
    mixes = pairer.retarget_channel(pairer.read_mixture_list(mix_list),
                                    pairer.ChannelMap.from_strings(params["rules"]))
    pairer.write_mixture_list(output, mixes)
    write_manifest(manifest_path(output), "retarget", params, run.seed, {"list": mix_list})
    click.echo(f"{len(mixes)} mixtures -> {output}")


def main():
    cli(prog_name="synthoverlap")


if __name__ == "__main__":
    main()
