#include "spatseg/commands.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "spatseg/synthgen.hpp"
#include "spatseg/train.hpp"

namespace spatseg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

void echo_config(std::ostream& out, const std::string& command, const json& config) {
    out << json{{"command", command}, {"config", config}}.dump(2) << '\n';
}

// ---- synthgen ---------------------------------------------------------------------------------

struct SynthArgs {
    std::string config, out, background_dir;
    std::size_t count = 100;
    std::optional<std::uint64_t> seed;
};

void add_synthgen(CLI::App& app, SynthArgs& a) {
    app.add_option("--config", a.config, "SynthConfig JSON file");
    app.add_option("--out", a.out, "Output directory")->required();
    app.add_option("--count", a.count, "Number of samples");
    app.add_option("--seed", a.seed, "Master seed");
    app.add_option("--background-dir", a.background_dir, "Directory of PGM backgrounds");
}

int run_synthgen(const SynthArgs& a, std::ostream& out) {
    SynthConfig cfg;
    if (!a.config.empty()) {
        json j = read_json_file(a.config);
        cfg = (j.contains("synth") ? j["synth"] : j).get<SynthConfig>();
    }
    if (a.seed) cfg.seed = *a.seed;
    if (!a.background_dir.empty()) cfg.background_dir = a.background_dir;
    cfg.validate();
    echo_config(out, "synthgen", json{{"synth", cfg}, {"count", a.count}, {"out", a.out}});
    const json manifest = generate_dataset(cfg, a.count, a.out);
    out << "wrote " << manifest["samples"].size() << " samples to " << a.out << '\n';
    return 0;
}

// ---- train ------------------------------------------------------------------------------------

struct TrainArgs {
    std::string config, data, out, log, loss, label_source, resume;
    std::optional<std::size_t> epochs, batch, max_steps, resize, range_begin, range_end;
    std::optional<std::uint64_t> seed, init_seed;
    std::optional<double> lr, lambda, sigma;
    bool no_wall_time = false;
};

void add_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--config", a.config, "RunConfig JSON file");
    app.add_option("--data", a.data, "Dataset directory");
    app.add_option("--out", a.out, "Checkpoint path")->required();
    app.add_option("--log", a.log, "CSV training log (default: checkpoint path with .csv)");
    app.add_option("--loss", a.loss, "spatial | ce-only")->check(CLI::IsMember({"spatial", "ce-only"}));
    app.add_option("--label-source", a.label_source, "pseudo | truth")->check(CLI::IsMember({"pseudo", "truth"}));
    app.add_option("--epochs", a.epochs);
    app.add_option("--batch", a.batch);
    app.add_option("--seed", a.seed);
    app.add_option("--init-seed", a.init_seed);
    app.add_option("--lr", a.lr);
    app.add_option("--lambda", a.lambda);
    app.add_option("--sigma", a.sigma);
    app.add_option("--resize", a.resize);
    app.add_option("--range-begin", a.range_begin);
    app.add_option("--range-end", a.range_end);
    app.add_option("--max-steps", a.max_steps, "Stop after this many global steps");
    app.add_option("--resume", a.resume, "Checkpoint to continue from");
    app.add_flag("--no-wall-time", a.no_wall_time, "Log wall_time as 0");
}

std::vector<std::string> read_log_lines(const fs::path& path, std::size_t keep_steps) {
    std::vector<std::string> rows;
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (rows.size() < keep_steps && std::getline(in, line))
        if (!line.empty()) rows.push_back(line);
    return rows;
}

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    if (!a.config.empty()) cfg = read_json_file(a.config).get<RunConfig>();
    if (!a.data.empty()) cfg.data_dir = a.data;
    if (!a.loss.empty()) cfg.loss_kind = a.loss == "spatial" ? LossKind::Spatial : LossKind::CrossEntropyOnly;
    if (!a.label_source.empty()) cfg.label_source = a.label_source == "pseudo" ? LabelSource::Pseudo : LabelSource::Truth;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.batch) cfg.batch_size = *a.batch;
    if (a.seed) cfg.seed = *a.seed;
    if (a.init_seed) cfg.init_seed = *a.init_seed;
    if (a.lr) cfg.optimizer.lr = *a.lr;
    if (a.lambda) cfg.loss.lambda = *a.lambda;
    if (a.sigma) cfg.loss.sigma = *a.sigma;
    if (a.resize) cfg.resize = *a.resize;
    if (a.range_begin) cfg.range_begin = *a.range_begin;
    if (a.range_end) cfg.range_end = *a.range_end;
    if (a.no_wall_time) cfg.log_wall_time = false;
    if (cfg.data_dir.empty()) throw ConfigError("train: no dataset given (--data or data_dir in --config)");
    cfg.validate();
    echo_config(out, "train", cfg);

    std::optional<Checkpoint> resume;
    if (!a.resume.empty()) resume = load_checkpoint(a.resume, &cfg.model);

    const bool pseudo = cfg.label_source == LabelSource::Pseudo;
    const auto items = load_dataset(cfg.data_dir, pseudo, !pseudo, cfg.resize);

    const fs::path ckpt = a.out;
    const fs::path log_path = a.log.empty() ? fs::path(ckpt).replace_extension(".csv") : fs::path(a.log);
    std::vector<std::string> previous;
    if (resume && resume->training) previous = read_log_lines(log_path, resume->training->global_step);

    TrainOptions opts;
    opts.max_steps = a.max_steps.value_or(0);
    std::size_t last_epoch = SIZE_MAX;
    double epoch_total = 0.0;
    std::size_t epoch_rows = 0;
    opts.on_step = [&](const LogRow& r) {
        if (r.epoch != last_epoch) {
            if (epoch_rows) err << "epoch " << last_epoch << " mean total " << epoch_total / epoch_rows << '\n';
            last_epoch = r.epoch;
            epoch_total = 0.0;
            epoch_rows = 0;
        }
        epoch_total += r.total;
        ++epoch_rows;
    };
    TrainResult res = train(cfg, items, opts, resume ? &*resume : nullptr);
    if (epoch_rows) err << "epoch " << last_epoch << " mean total " << epoch_total / epoch_rows << '\n';

    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    save_checkpoint(ckpt, res.params, &res.state);
    {
        std::ofstream log(log_path, std::ios::trunc);
        if (!log) throw IoError("cannot write " + log_path.string());
        log << kTrainLogHeader << '\n';
        for (const auto& line : previous) log << line << '\n';
        for (const auto& r : res.log) log << format_log_row(r) << '\n';
        if (!log) throw IoError("write failed: " + log_path.string());
    }
    out << "steps " << res.state.global_step << ", checkpoint " << ckpt.string() << ", log " << log_path.string()
        << '\n';
    return 0;
}

// ---- eval -------------------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, pred_dir, data, out, method;
    std::size_t resize = 0, range_begin = 0, range_end = 0;
    std::optional<std::size_t> threads;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    auto* ck = app.add_option("--checkpoint", a.checkpoint, "Model checkpoint");
    auto* pd = app.add_option("--pred-dir", a.pred_dir, "Directory of prediction masks named like the images");
    ck->excludes(pd);
    app.add_option("--data", a.data, "Dataset directory with images/ and truth/")->required();
    app.add_option("--out", a.out, "Report JSON path")->required();
    app.add_option("--method", a.method, "Method name stored in the report");
    app.add_option("--resize", a.resize);
    app.add_option("--range-begin", a.range_begin, "First image index to score");
    app.add_option("--range-end", a.range_end, "One past the last image index (0 = all)");
    app.add_option("--threads", a.threads, "Worker count (default SPATSEG_THREADS)");
}

int run_eval(const EvalArgs& a, std::ostream& out) {
    if (a.checkpoint.empty() == a.pred_dir.empty()) throw CLI::ValidationError("eval", "give one of --checkpoint or --pred-dir");
    const std::size_t threads = a.threads.value_or(eval_threads_from_env());
    const std::string method = !a.method.empty() ? a.method : !a.checkpoint.empty() ? fs::path(a.checkpoint).stem().string()
                                                                                    : fs::path(a.pred_dir).filename().string();
    echo_config(out, "eval",
                json{{"checkpoint", a.checkpoint}, {"pred_dir", a.pred_dir}, {"data", a.data}, {"out", a.out},
                     {"method", method}, {"resize", a.resize}, {"range", {a.range_begin, a.range_end}},
                     {"threads", threads}});

    if (!fs::is_directory(fs::path(a.data) / "truth")) throw DataError("eval: " + a.data + " has no truth/ directory");
    auto items = load_dataset(a.data, false, true, a.resize);
    const std::size_t end = a.range_end ? std::min(a.range_end, items.size()) : items.size();
    if (a.range_begin >= end) throw DataError("eval: no images in the selected range");
    items = std::vector<DatasetItem>(items.begin() + a.range_begin, items.begin() + end);

    std::function<LabelMap(const DatasetItem&)> fn;
    std::optional<Checkpoint> ck;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        fn = [&](const DatasetItem& it) { return predict(ck->params, it.image).labels; };
    } else {
        fn = [&](const DatasetItem& it) {
            const fs::path p = fs::path(a.pred_dir) / (it.id + ".pgm");
            if (!fs::exists(p)) throw DataError("eval: no prediction " + p.string());
            return resize_nearest(read_mask_pgm(p), it.image.height, it.image.width);
        };
    }
    const MetricsReport rep = evaluate(items, fn, threads, method, fs::path(a.data).filename().string());
    write_json_file(a.out, report_to_json(rep));
    out << std::setprecision(4) << "dice " << rep.dice.mean << " +- " << rep.dice.std << ", precision "
        << rep.precision.mean << " +- " << rep.precision.std << ", recall " << rep.recall.mean << " +- "
        << rep.recall.std << " over " << rep.per_image.size() << " images\n";
    return 0;
}

// ---- predict ----------------------------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint, image, out, prob_out;
    std::size_t resize = 0;
};

void add_predict(CLI::App& app, PredictArgs& a) {
    app.add_option("--checkpoint", a.checkpoint)->required();
    app.add_option("--image", a.image)->required();
    app.add_option("--out", a.out, "Mask PGM (0/255)")->required();
    app.add_option("--prob-out", a.prob_out, "Foreground probability PGM");
    app.add_option("--resize", a.resize);
}

int run_predict(const PredictArgs& a, std::ostream& out) {
    echo_config(out, "predict",
                json{{"checkpoint", a.checkpoint}, {"image", a.image}, {"out", a.out}, {"prob_out", a.prob_out},
                     {"resize", a.resize}});
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    Image img = read_image_pgm(a.image);
    if (a.resize) img = resize_bilinear(img, a.resize, a.resize);
    const Prediction p = predict(ck.params, img);
    write_mask_pgm(a.out, p.labels);
    if (!a.prob_out.empty()) {
        Image fg{img.height, img.width, {}};
        const std::size_t hw = img.height * img.width;
        fg.pixels.assign(p.probs.data() + hw, p.probs.data() + 2 * hw);
        write_image_pgm(a.prob_out, fg);
    }
    out << "foreground pixels " << p.labels.count(1) << " of " << p.labels.size() << '\n';
    return 0;
}

// ---- compare ----------------------------------------------------------------------------------

struct CompareArgs {
    std::string a, b, out;
};

void add_compare(CLI::App& app, CompareArgs& c) {
    app.add_option("report_a", c.a, "First report JSON")->required();
    app.add_option("report_b", c.b, "Second report JSON")->required();
    app.add_option("--out", c.out, "Write the comparison as JSON");
}

int run_compare(const CompareArgs& c, std::ostream& out) {
    echo_config(out, "compare", json{{"report_a", c.a}, {"report_b", c.b}, {"out", c.out}});
    const MetricsReport ra = report_from_json(read_json_file(c.a));
    const MetricsReport rb = report_from_json(read_json_file(c.b));
    std::map<std::string, const ImageScores*> by_id;
    for (const auto& s : rb.per_image) by_id[s.id] = &s;
    std::set<std::string> ids_a;
    std::vector<std::string> only_a, only_b;
    std::vector<double> da, db;
    for (const auto& s : ra.per_image) {
        ids_a.insert(s.id);
        auto it = by_id.find(s.id);
        if (it == by_id.end()) {
            only_a.push_back(s.id);
            continue;
        }
        da.push_back(s.dice);
        db.push_back(it->second->dice);
    }
    for (const auto& s : rb.per_image)
        if (!ids_a.count(s.id)) only_b.push_back(s.id);
    if (!only_a.empty() || !only_b.empty()) {
        std::ostringstream msg;
        msg << "compare: image ids differ;";
        if (!only_a.empty()) {
            msg << " missing from " << c.b << ":";
            for (const auto& id : only_a) msg << ' ' << id;
            msg << ';';
        }
        if (!only_b.empty()) {
            msg << " missing from " << c.a << ":";
            for (const auto& id : only_b) msg << ' ' << id;
        }
        throw DataError(msg.str());
    }
    const WilcoxonResult w = wilcoxon_signed_rank(da, db);
    auto summary = [](const MetricsReport& r) {
        return json{{"method", r.method},
                    {"dice", r.dice.mean},
                    {"precision", r.precision.mean},
                    {"recall", r.recall.mean}};
    };
    const json result{{"a", summary(ra)},
                      {"b", summary(rb)},
                      {"wilcoxon_dice",
                       {{"n", w.n_effective},
                        {"w", w.w},
                        {"w_plus", w.w_plus},
                        {"w_minus", w.w_minus},
                        {"p_value", w.p_value},
                        {"method", w.method == WilcoxonMethod::Exact ? "exact" : "normal"}}}};
    out << std::setprecision(4);
    for (const char* m : {"dice", "precision", "recall"})
        out << m << ": " << result["a"][m].get<double>() << " vs " << result["b"][m].get<double>() << '\n';
    out << std::setprecision(6) << "wilcoxon (dice, two-sided): n=" << w.n_effective << " W=" << w.w
        << " p=" << w.p_value << '\n';
    if (!c.out.empty()) write_json_file(c.out, result);
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Fiber segmentation with a spatial-consistency loss"};
    app.require_subcommand(1);
    SynthArgs synth;
    TrainArgs tr;
    EvalArgs ev;
    PredictArgs pr;
    CompareArgs cmp;
    add_synthgen(*app.add_subcommand("synthgen", "Generate a synthetic dataset"), synth);
    add_train(*app.add_subcommand("train", "Train a model"), tr);
    add_eval(*app.add_subcommand("eval", "Score predictions against truth masks"), ev);
    add_predict(*app.add_subcommand("predict", "Segment one image"), pr);
    add_compare(*app.add_subcommand("compare", "Compare two reports"), cmp);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 2;
    }
    try {
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "synthgen") return run_synthgen(synth, out);
        if (name == "train") return run_train(tr, out, err);
        if (name == "eval") return run_eval(ev, out);
        if (name == "predict") return run_predict(pr, out);
        return run_compare(cmp, out);
    } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace spatseg
