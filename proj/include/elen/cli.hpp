#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "elen/bench.hpp"
#include "elen/bpe.hpp"
#include "elen/checkpoint.hpp"
#include "elen/documents.hpp"
#include "elen/forward.hpp"
#include "elen/packing.hpp"
#include "elen/presets.hpp"
#include "elen/trainer.hpp"
#include "elen/transplant.hpp"
#include "elen/vocab.hpp"

namespace elen {
namespace cli_detail {

inline std::string joined(const std::string& out_dir, const std::string& path) {
    if (path.empty() || out_dir.empty()) return path;
    std::filesystem::path p(path);
    if (p.is_absolute()) return path;
    return (std::filesystem::path(out_dir) / p).string();
}

// A corpus argument is a directory of files (one document each, sorted), an
// NDJSON document file, or a plain text file (one document per line).
inline std::vector<std::string> read_corpus(const std::string& path) {
    namespace fs = std::filesystem;
    std::vector<std::string> docs;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            std::ifstream in(f, std::ios::binary);
            if (!in) throw std::runtime_error("cannot read " + f.string());
            std::string text((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
            if (!text.empty()) docs.push_back(std::move(text));
        }
        return docs;
    }
    if (!fs::is_regular_file(path))
        throw std::invalid_argument("corpus not found: " + path);
    if (path.ends_with(".ndjson") || path.ends_with(".jsonl")) {
        for (const auto& d : read_ndjson(path)) docs.push_back(d.text);
        return docs;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) docs.push_back(line);
    return docs;
}

struct RunSpec {
    EncoderConfig model;
    TrainOptions opts;
    std::string pack_path;
    std::string heldout_path;  // optional
    std::string vocab_path;    // optional; enables per-epoch re-masking
    std::string out_path = "model.elen";
    std::string metrics_path;  // optional
};

// Run config JSON: {model, data, schedule?, curriculum?, optimizer?, stage}.
// stage.preset pulls a shipped recipe scaled to stage.target_tokens; explicit
// sections override the preset's pieces.
inline RunSpec parse_run_config(const nlohmann::json& j, uint64_t seed) {
    RunSpec r;
    r.model = EncoderConfig::from_json(j.at("model"));
    const auto& stage = j.at("stage");
    const uint64_t target = stage.at("target_tokens").get<uint64_t>();
    if (stage.contains("preset")) {
        Preset p = scale_to_budget(
            preset_by_name(stage.at("preset").get<std::string>()), target);
        r.opts = p.train_options(seed);
    } else {
        r.opts.seed = seed;
        r.opts.target_tokens = target;
    }
    if (j.contains("schedule")) r.opts.schedule = ScheduleSpec::from_json(j["schedule"]);
    if (j.contains("curriculum"))
        r.opts.curriculum = CurriculumSpec::from_json(j["curriculum"]);
    if (j.contains("optimizer")) r.opts.optimizer = OptHyper::from_json(j["optimizer"]);
    if (stage.contains("batch_rows")) r.opts.batch_rows = stage["batch_rows"].get<uint32_t>();
    if (stage.contains("mlm_prob_ws")) r.opts.mlm_prob_ws = stage["mlm_prob_ws"].get<double>();
    if (stage.contains("mlm_prob_decay"))
        r.opts.mlm_prob_decay = stage["mlm_prob_decay"].get<double>();
    if (stage.contains("remask")) r.opts.remask_each_epoch = stage["remask"].get<bool>();
    if (stage.contains("seed")) r.opts.seed = stage["seed"].get<uint64_t>();
    if (stage.contains("out")) r.out_path = stage["out"].get<std::string>();
    if (stage.contains("metrics")) r.metrics_path = stage["metrics"].get<std::string>();

    const auto& data = j.at("data");
    r.pack_path = data.at("pack").get<std::string>();
    if (data.contains("heldout_pack")) r.heldout_path = data["heldout_pack"].get<std::string>();
    if (data.contains("vocab")) r.vocab_path = data["vocab"].get<std::string>();

    r.opts.schedule.validate();
    r.opts.curriculum.validate(r.model);
    r.opts.optimizer.validate();
    if (r.opts.target_tokens == 0)
        throw std::invalid_argument("run config: target_tokens must be > 0");
    return r;
}

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

inline uint64_t pack_token_count(const PackedBatch& b) {
    uint64_t n = 0;
    for (const auto& r : b.rows) n += r.pad_start();
    return n;
}

inline std::vector<Granularity> parse_grid(const std::string& axis) {
    if (axis == "heads") return granularity_grid_heads();
    if (axis == "mlp") return granularity_grid_mlp();
    throw std::invalid_argument("unknown grid axis: " + axis);
}

inline int train_with(const RunSpec& spec, const std::string& resume_path,
                      const std::string& out_dir) {
    PackedBatch data = read_pack(spec.pack_path);
    std::optional<Vocab> vocab;
    if (!spec.vocab_path.empty()) vocab = Vocab::load(spec.vocab_path);

    ParamSet<float> params;
    std::optional<OptState<float>> opt;
    TrainerCursor cursor;
    cursor.base_seed = spec.opts.seed;
    if (!resume_path.empty()) {
        auto ck = load_train_checkpoint<float>(resume_path);
        if (!(ck.cfg == spec.model))
            throw std::invalid_argument("resume checkpoint does not match run config model");
        params = std::move(ck.params);
        opt = std::move(ck.opt);
        cursor = ck.cursor;
    } else {
        params = init_params<float>(spec.model, spec.opts.seed);
    }

    std::ofstream metrics;
    std::ostream* msink = nullptr;
    if (!spec.metrics_path.empty()) {
        metrics.open(joined(out_dir, spec.metrics_path),
                     resume_path.empty() ? std::ios::trunc : std::ios::app);
        if (!metrics) throw std::runtime_error("cannot write metrics file");
        msink = &metrics;
    }

    auto res = train_run(spec.model, std::move(params), data, spec.opts,
                         vocab ? &*vocab : nullptr, msink, std::move(opt), cursor);
    const std::string out = joined(out_dir, spec.out_path);
    save_train_checkpoint(out, spec.model, res.params, res.opt, res.cursor);
    std::cout << "trained to " << res.cursor.tokens_seen << " tokens in "
              << res.cursor.step << " steps -> " << out << "\n";
    if (!spec.heldout_path.empty()) {
        PackedBatch held = read_pack(joined("", spec.heldout_path));
        double l = evaluate_mlm(spec.model, res.params, held, {1.0, 1.0});
        std::cout << "heldout loss (full granularity): " << l << "\n";
    }
    return 0;
}

}  // namespace cli_detail

// Single entrypoint behind the `elen` binary.  Exit codes: 0 ok, 1 runtime
// failure, 2 usage/config error.
inline int run_command(const std::vector<std::string>& args) {
    using cli_detail::joined;
    CLI::App app{"elastic masked-LM encoder toolkit"};
    app.name("elen");
    app.require_subcommand(1);

    uint64_t seed = 42;
    std::string config_path, out_dir;
    bool dry_run = false;
    app.add_option("--seed", seed, "global RNG seed");
    app.add_option("--config", config_path, "JSON config file");
    app.add_flag("--dry-run", dry_run, "validate configuration and exit");
    app.add_option("--out-dir", out_dir, "directory for written artifacts");

    // ---- tok ----
    auto* tok = app.add_subcommand("tok", "tokenizer tools");
    tok->require_subcommand(1);
    auto* tok_train = tok->add_subcommand("train", "train a byte-level BPE vocabulary");
    std::string tt_corpus, tt_out = "vocab.json";
    uint32_t tt_size = kVocabTargetSize;
    tok_train->add_option("--corpus", tt_corpus, "corpus directory or file")->required();
    tok_train->add_option("--size", tt_size, "target vocabulary size");
    tok_train->add_option("--out", tt_out, "output vocab JSON");

    auto* tok_overlap = tok->add_subcommand("overlap", "vocabulary overlap fraction");
    std::string to_a, to_b;
    tok_overlap->add_option("--a", to_a)->required();
    tok_overlap->add_option("--b", to_b)->required();

    auto* tok_tx = tok->add_subcommand("transplant", "re-initialize embeddings for a new vocabulary");
    std::string tx_src_vocab, tx_src_emb, tx_dst_vocab, tx_out = "transplanted.elen";
    tok_tx->add_option("--src-vocab", tx_src_vocab)->required();
    tok_tx->add_option("--src-emb", tx_src_emb, "source model checkpoint")->required();
    tok_tx->add_option("--dst-vocab", tx_dst_vocab)->required();
    tok_tx->add_option("--out", tx_out);

    // ---- data ----
    auto* data = app.add_subcommand("data", "curation and packing");
    data->require_subcommand(1);
    auto* curate = data->add_subcommand("curate", "dedup, quality filter, domain selection");
    std::string cu_in, cu_out = "curated.ndjson", cu_domain = "none";
    double cu_threshold = 0.2;
    curate->add_option("--in", cu_in, "NDJSON documents")->required();
    curate->add_option("--out", cu_out);
    curate->add_option("--quality-threshold", cu_threshold);
    curate->add_option("--domain", cu_domain)->check(CLI::IsMember({"biomed", "legal", "none"}));

    auto* pack = data->add_subcommand("pack", "tokenize and pack into training rows");
    std::string pk_in, pk_vocab, pk_out = "batch.pack";
    uint32_t pk_len = 1024;
    double pk_mlm = 0.3;
    pack->add_option("--in", pk_in, "curated NDJSON documents")->required();
    pack->add_option("--vocab", pk_vocab)->required();
    pack->add_option("--len", pk_len, "row length");
    pack->add_option("--mlm", pk_mlm, "masking probability");
    pack->add_option("--out", pk_out);

    // ---- train ----
    auto* train = app.add_subcommand("train", "staged pre-training");
    std::string tr_resume, tr_preset;
    train->add_option("--resume", tr_resume, "trainer checkpoint to continue");
    train->add_option("--preset", tr_preset, "validate/apply a shipped recipe");

    // ---- adapt ----
    auto* adapt = app.add_subcommand("adapt", "language adaptation (optional vocabulary transplant)");
    std::string ad_init, ad_vocab, ad_src_vocab, ad_data, ad_out = "adapted.elen";
    bool ad_transplant = false;
    uint64_t ad_tokens = 0;
    adapt->add_option("--init", ad_init, "base model or trainer checkpoint")->required();
    adapt->add_option("--vocab", ad_vocab, "new vocabulary JSON");
    adapt->add_flag("--transplant", ad_transplant, "transplant embeddings into --vocab");
    adapt->add_option("--src-vocab", ad_src_vocab, "vocabulary of the base model");
    adapt->add_option("--data", ad_data, "PACK training file");
    adapt->add_option("--tokens", ad_tokens, "token budget (default: one pass)");
    adapt->add_option("--out", ad_out);

    auto* adapt_dom = app.add_subcommand("adapt-domain", "domain continued pre-training");
    std::string dd_init, dd_domain = "legal", dd_data, dd_out = "domain.elen";
    uint32_t dd_epochs = 0;
    adapt_dom->add_option("--init", dd_init)->required();
    adapt_dom->add_option("--domain", dd_domain)->check(CLI::IsMember({"legal", "biomed"}));
    adapt_dom->add_option("--epochs", dd_epochs, "override the preset epoch count");
    adapt_dom->add_option("--data", dd_data, "PACK training file");
    adapt_dom->add_option("--out", dd_out);

    // ---- slice ----
    auto* slice = app.add_subcommand("slice", "export a nested sub-network");
    std::string sl_ckpt, sl_out = "sliced.elen";
    double sl_heads = 1.0, sl_mlp = 1.0;
    slice->add_option("--ckpt", sl_ckpt)->required();
    slice->add_option("--heads", sl_heads, "head fraction");
    slice->add_option("--mlp", sl_mlp, "MLP fraction");
    slice->add_option("--out", sl_out);

    // ---- bench ----
    auto* bench = app.add_subcommand("bench", "forward-only throughput");
    std::string be_ckpt, be_grid = "heads", be_out;
    uint32_t be_seq = 8192, be_batch = 2, be_repeats = 9, be_warmup = 2;
    bench->add_option("--ckpt", be_ckpt)->required();
    bench->add_option("--grid", be_grid)->check(CLI::IsMember({"heads", "mlp", "full"}));
    bench->add_option("--seq", be_seq);
    bench->add_option("--batch", be_batch);
    bench->add_option("--repeats", be_repeats);
    bench->add_option("--warmup", be_warmup);
    bench->add_option("--out", be_out, "JSON report path");

    std::vector<const char*> argv;
    argv.push_back("elen");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (tok_train->parsed()) {
            auto corpus = cli_detail::read_corpus(tt_corpus);
            if (dry_run) {
                if (tt_size < kNumSpecials + 256)
                    throw std::invalid_argument("--size below the byte alphabet");
                std::cout << "ok: " << corpus.size() << " documents\n";
                return 0;
            }
            Vocab v = train_bpe(corpus, tt_size);
            v.save(joined(out_dir, tt_out));
            std::cout << "vocab size " << v.size() << " (" << v.merges.size()
                      << " merges) -> " << joined(out_dir, tt_out) << "\n";
        } else if (tok_overlap->parsed()) {
            Vocab a = Vocab::load(to_a), b = Vocab::load(to_b);
            std::cout << nlohmann::json{{"overlap", vocab_overlap(a, b)}}.dump() << "\n";
        } else if (tok_tx->parsed()) {
            Vocab src = Vocab::load(tx_src_vocab), dst = Vocab::load(tx_dst_vocab);
            auto [cfg, ps] = load_model<float>(tx_src_emb);
            if (cfg.vocab_size != src.size())
                throw std::invalid_argument("source model/vocabulary size mismatch");
            auto plan = build_transplant_plan(src, dst);
            if (dry_run) {
                std::cout << nlohmann::json{{"overlap", plan.overlap}}.dump() << "\n";
                return 0;
            }
            ps.tok_emb = transplant_embeddings(plan, ps.tok_emb, seed);
            cfg.vocab_size = dst.size();
            save_model(joined(out_dir, tx_out), cfg, ps);
            std::cout << "overlap " << plan.overlap << " -> " << joined(out_dir, tx_out)
                      << "\n";
        } else if (curate->parsed()) {
            auto docs = read_ndjson(cu_in);
            const size_t n_in = docs.size();
            docs = dedup_exact(docs);
            const size_t n_dedup = docs.size();
            docs = quality_filter(docs, cu_threshold);
            const size_t n_quality = docs.size();
            if (cu_domain != "none") {
                std::vector<Document> kept;
                for (auto& d : docs) {
                    if (!d.domain_probs) continue;
                    auto sel = domain_select(*d.domain_probs);
                    if (sel && *sel == cu_domain) kept.push_back(std::move(d));
                }
                docs = std::move(kept);
            }
            if (dry_run) {
                std::cout << "ok: " << docs.size() << " documents would be kept\n";
                return 0;
            }
            write_ndjson(joined(out_dir, cu_out), docs);
            std::cout << n_in << " in, " << n_dedup << " after dedup, " << n_quality
                      << " after quality, " << docs.size() << " out -> "
                      << joined(out_dir, cu_out) << "\n";
        } else if (pack->parsed()) {
            Vocab v = Vocab::load(pk_vocab);
            if (!(pk_mlm > 0.0 && pk_mlm < 1.0))
                throw std::invalid_argument("--mlm must be in (0,1)");
            auto docs = read_ndjson(pk_in);
            if (dry_run) {
                std::cout << "ok: " << docs.size() << " documents\n";
                return 0;
            }
            std::vector<std::vector<uint32_t>> streams;
            streams.reserve(docs.size());
            for (const auto& d : docs) {
                auto ids = encode(v, d.text);
                if (!ids.empty()) streams.push_back(std::move(ids));
            }
            PackedBatch batch;
            batch.seq_len = pk_len;
            batch.vocab_size = v.size();
            batch.rows = pack_documents(streams, pk_len, v);
            for (size_t i = 0; i < batch.rows.size(); ++i)
                batch.rows[i] = apply_mlm(batch.rows[i], pk_mlm, v,
                                          detail::mix_seed(seed, 0, i));
            write_pack(joined(out_dir, pk_out), batch);
            std::cout << batch.rows.size() << " rows of length " << pk_len << " -> "
                      << joined(out_dir, pk_out) << "\n";
        } else if (train->parsed()) {
            if (!tr_preset.empty() && config_path.empty()) {
                Preset p = preset_by_name(tr_preset);
                p.validate();
                if (!dry_run)
                    throw std::invalid_argument(
                        "train needs --config; --preset alone only supports --dry-run");
                std::cout << "preset " << p.name << " ok\n";
                return 0;
            }
            if (config_path.empty())
                throw std::invalid_argument("train requires --config run.json");
            auto spec = cli_detail::parse_run_config(
                cli_detail::load_json_file(config_path), seed);
            if (dry_run) {
                std::cout << "config ok\n";
                return 0;
            }
            return cli_detail::train_with(spec, tr_resume, out_dir);
        } else if (adapt->parsed()) {
            auto [cfg, ps] = load_model<float>(ad_init);
            Preset p = preset_by_name("adapt-lang");
            std::optional<Vocab> train_vocab;
            if (ad_transplant) {
                if (ad_vocab.empty() || ad_src_vocab.empty())
                    throw std::invalid_argument("--transplant needs --vocab and --src-vocab");
                Vocab src = Vocab::load(ad_src_vocab), dst = Vocab::load(ad_vocab);
                if (cfg.vocab_size != src.size())
                    throw std::invalid_argument("base model/--src-vocab size mismatch");
                auto plan = build_transplant_plan(src, dst);
                ps.tok_emb = transplant_embeddings(plan, ps.tok_emb, seed);
                cfg.vocab_size = dst.size();
                train_vocab = std::move(dst);
                std::cout << "transplant overlap " << plan.overlap << "\n";
            } else if (!ad_vocab.empty()) {
                train_vocab = Vocab::load(ad_vocab);
            }
            if (dry_run) {
                std::cout << "ok\n";
                return 0;
            }
            if (ad_data.empty()) throw std::invalid_argument("adapt needs --data");
            PackedBatch batch = read_pack(ad_data);
            uint64_t budget = ad_tokens ? ad_tokens : cli_detail::pack_token_count(batch);
            TrainOptions opts = scale_to_budget(p, budget).train_options(seed);
            auto res = train_run(cfg, std::move(ps), batch, opts,
                                 train_vocab ? &*train_vocab : nullptr);
            save_train_checkpoint(joined(out_dir, ad_out), cfg, res.params, res.opt,
                                  res.cursor);
            std::cout << "adapted over " << res.cursor.tokens_seen << " tokens -> "
                      << joined(out_dir, ad_out) << "\n";
        } else if (adapt_dom->parsed()) {
            auto [cfg, ps] = load_model<float>(dd_init);
            Preset p = preset_by_name(dd_domain == "legal" ? "adapt-domain-legal"
                                                           : "adapt-domain-biomed");
            if (dd_epochs) p.epochs = dd_epochs;
            if (dry_run) {
                std::cout << "preset " << p.name << " epochs " << p.epochs << " ok\n";
                return 0;
            }
            if (dd_data.empty()) throw std::invalid_argument("adapt-domain needs --data");
            PackedBatch batch = read_pack(dd_data);
            const uint64_t budget =
                uint64_t(p.epochs) * cli_detail::pack_token_count(batch);
            TrainOptions opts = scale_to_budget(p, budget).train_options(seed);
            auto res = train_run(cfg, std::move(ps), batch, opts);
            save_train_checkpoint(joined(out_dir, dd_out), cfg, res.params, res.opt,
                                  res.cursor);
            std::cout << "adapted " << p.epochs << " epochs (" << res.cursor.tokens_seen
                      << " tokens) -> " << joined(out_dir, dd_out) << "\n";
        } else if (slice->parsed()) {
            auto [cfg, ps] = load_model<float>(sl_ckpt);
            Granularity g{sl_heads, sl_mlp};
            validate_granularity(cfg, g);
            if (dry_run) {
                std::cout << "ok\n";
                return 0;
            }
            auto [scfg, sps] = slice_params(ps, cfg, g);
            save_model(joined(out_dir, sl_out), scfg, sps);
            std::cout << "sliced to " << scfg.n_heads << " heads / " << scfg.d_ff
                      << " MLP units (" << param_count(sps) << " params) -> "
                      << joined(out_dir, sl_out) << "\n";
        } else if (bench->parsed()) {
            auto [cfg, ps] = load_model<float>(be_ckpt);
            std::vector<Granularity> grid;
            if (be_grid == "full")
                grid = {{1.0, 1.0}};
            else
                grid = cli_detail::parse_grid(be_grid);
            if (dry_run) {
                std::cout << "ok\n";
                return 0;
            }
            BenchReport rep;
            rep.repeats = be_repeats;
            rep.environment = "single-thread cpu, f32";
            for (const auto& g : grid) {
                rep.rows.push_back(
                    throughput(cfg, ps, g, be_seq, be_batch, be_repeats, be_warmup, seed));
                const auto& r = rep.rows.back();
                std::cout << "f_head " << r.f_head << " f_mlp " << r.f_mlp << ": "
                          << r.samples_per_s << " samples/s\n";
            }
            if (be_grid != "full") {
                auto rows = speedup_report(rep);
                std::cout << render_speedup_table(rows);
                if (!be_out.empty()) {
                    nlohmann::json j = rep.to_json();
                    j["speedup"] = speedup_json(rows);
                    std::ofstream f(joined(out_dir, be_out));
                    f << j.dump(2) << "\n";
                }
            } else if (!be_out.empty()) {
                std::ofstream f(joined(out_dir, be_out));
                f << rep.to_json().dump(2) << "\n";
            }
        }
        return 0;
    } catch (const std::invalid_argument& e) {
        std::cerr << "elen: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "elen: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace elen
