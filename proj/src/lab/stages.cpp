#include "diffmark/lab/stages.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "diffmark/core/errors.hpp"
#include "diffmark/ident/identify.hpp"
#include "diffmark/io/checkpoint.hpp"
#include "diffmark/io/image.hpp"
#include "diffmark/pipeline/analysis.hpp"

namespace diffmark::lab {

using nlohmann::json;

namespace {

void log(const std::string& stage, const std::string& msg) { std::clog << "[" << stage << "] " << msg << std::endl; }

// Rejects keys the defaults do not have.
void check_keys(const json& given, const json& ref, const std::string& path) {
    if (!given.is_object() || !ref.is_object()) return;
    for (const auto& [k, v] : given.items()) {
        const std::string p = path.empty() ? k : path + "." + k;
        if (!ref.contains(k)) throw ConfigError("unknown config key '" + p + "'");
        check_keys(v, ref.at(k), p);
    }
}

// Enum fields map unknown strings to a default silently; a string that does
// not survive the round trip was not a valid value.
void check_strings(const json& given, const json& parsed, const std::string& path) {
    if (given.is_string()) {
        if (given != parsed) throw ConfigError("invalid value '" + given.get<std::string>() + "' for '" + path + "'");
    } else if (given.is_object() && parsed.is_object()) {
        for (const auto& [k, v] : given.items())
            if (parsed.contains(k)) check_strings(v, parsed.at(k), path.empty() ? k : path + "." + k);
    } else if (given.is_array() && parsed.is_array() && given.size() == parsed.size()) {
        for (std::size_t i = 0; i < given.size(); ++i)
            check_strings(given[i], parsed[i], path + "[" + std::to_string(i) + "]");
    }
}

std::string hex_hash(const std::string& s) {
    return io::sha256_hex({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void save_codec(const fs::path& dir, codec::Encoder<float>& enc, codec::Decoder<float>& dec, const json& meta) {
    nn::State<float> s;
    enc.state(s, "encoder");
    dec.state(s, "decoder");
    json m = meta;
    m["codec"] = enc.config();
    io::save_checkpoint(dir, "codec", m, s);
}

std::pair<codec::Encoder<float>, codec::Decoder<float>> load_codec(const fs::path& dir, const codec::CodecConfig& c) {
    codec::Encoder<float> enc(c, 0);
    codec::Decoder<float> dec(c, 0);
    nn::State<float> s;
    enc.state(s, "encoder");
    dec.state(s, "decoder");
    io::load_checkpoint(dir, "codec", s);
    return {std::move(enc), std::move(dec)};
}

std::vector<codec::Secret> secrets_of(const std::vector<pipeline::EmbedRequest>& reqs) {
    std::vector<codec::Secret> s;
    for (const auto& r : reqs) s.push_back(r.secret);
    return s;
}

Tensor<float> stack_images(const std::vector<Tensor<float>>& imgs) {
    if (imgs.empty()) throw PreconditionError("no images");
    Shape s = imgs[0].shape;
    s.insert(s.begin(), static_cast<int>(imgs.size()));
    Tensor<float> out(s);
    const std::size_t per = imgs[0].size();
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].shape != imgs[0].shape) throw ShapeError("images differ in size");
        std::copy(imgs[i].data.begin(), imgs[i].data.end(), out.data.begin() + i * per);
    }
    return out;
}

Tensor<float> read_image_batch(const fs::path& p) {
    auto img = io::read_png(p);
    img.shape.insert(img.shape.begin(), 1);
    return img;
}

void write_image_batch(const fs::path& dir, const std::vector<std::string>& names, const Tensor<float>& imgs) {
    const int per = 3 * imgs.dim(2) * imgs.dim(3);
    for (std::size_t i = 0; i < names.size(); ++i)
        io::write_png(dir / names[i], imgs.ptr() + i * per, imgs.dim(2), imgs.dim(3));
}

std::string image_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d.png", i);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
}

}  // namespace

ExperimentConfig default_config() {
    ExperimentConfig c;
    c.vae_train.epochs = 6;
    c.denoiser_train.epochs = 15;
    c.distill.steps = 1500;
    c.codec.bits = 16;
    c.codec.embed_dim = 64;
    c.pretrain.seed = 14;
    c.stages = stage_names();
    return c;
}

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"gen-data",     "train-vae", "train-diffusion", "distill-lcm",
                                                "pretrain-codec", "train-watermark", "embed",   "detect",
                                                "attack-sweep", "identify",  "transfer",        "report"};
    return names;
}

std::vector<std::string> dependencies(const std::string& stage) {
    static const std::map<std::string, std::vector<std::string>> deps{
        {"gen-data", {}},
        {"train-vae", {"gen-data"}},
        {"train-diffusion", {"train-vae"}},
        {"distill-lcm", {"train-diffusion"}},
        {"pretrain-codec", {}},
        {"train-watermark", {"distill-lcm", "pretrain-codec"}},
        {"embed", {"train-watermark"}},
        {"detect", {"embed"}},
        {"attack-sweep", {"train-watermark"}},
        {"identify", {"train-watermark"}},
        {"transfer", {"train-watermark"}},
        {"report", {"train-watermark"}}};
    const auto it = deps.find(stage);
    if (it == deps.end()) throw ConfigError("unknown stage '" + stage + "'");
    return it->second;
}

ExperimentConfig parse_config(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    json base = default_config();
    check_keys(j, base, "");
    base.merge_patch(j);
    ExperimentConfig c;
    try {
        c = base.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config type error: ") + e.what());
    }
    check_strings(j, json(c), "");
    for (const auto& s : c.stages) dependencies(s);
    try {
        training::validate(c.train);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("train: ") + e.what());
    }
    if (c.data.n < 0) throw ConfigError("data.n must be non-negative");
    if (c.codec.bits < 1) throw ConfigError("codec.bits must be positive");
    if (!(c.eval.fpr > 0 && c.eval.fpr <= 1)) throw ConfigError("eval.fpr must lie in (0, 1]");
    if (c.eval.images < 2) throw ConfigError("eval.images must be at least 2");
    if (c.eval.sweep_levels < 2) throw ConfigError("eval.sweep_levels must be at least 2");
    if (c.codec.bits < 63 && c.eval.ident_real > (1L << c.codec.bits))
        throw ConfigError("eval.ident_real exceeds the number of distinct keys");
    return c;
}

void apply_override(json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;
    }
    json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) (*node)[parts[i]] = json::object();
        node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = parsed;
}

ExperimentConfig load_config(const fs::path& p, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (!p.empty()) {
        std::ifstream f(p);
        if (!f) throw ConfigError("cannot open config " + p.string());
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw ConfigError("config " + p.string() + " is not valid JSON: " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return parse_config(j);
}

std::string config_hash(const json& j) { return hex_hash(j.dump()).substr(0, 16); }

fs::path resolve_root(const std::string& explicit_root) {
    if (!explicit_root.empty()) return explicit_root;
    if (const char* env = std::getenv("DIFFMARK_OUTPUT_ROOT"); env && *env) return env;
    return "diffmark_out";
}

std::map<std::string, std::string> hash_tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = io::sha256_file(e.path());
    return out;
}

Lab::Lab(ExperimentConfig cfg, fs::path root) : cfg_(std::move(cfg)), cfg_json_(cfg_), root_(std::move(root)) {}

std::string Lab::stage_hash(const std::string& stage) const {
    static const std::map<std::string, std::vector<std::string>> blocks{
        {"gen-data", {"data"}},
        {"train-vae", {"vae", "vae_train"}},
        {"train-diffusion", {"denoiser", "denoiser_train"}},
        {"distill-lcm", {"distill"}},
        {"pretrain-codec", {"codec", "pretrain"}},
        {"train-watermark", {"train", "embed", "seed"}},
        {"embed", {"embed", "eval", "seed"}},
        {"detect", {"eval"}},
        {"attack-sweep", {"embed", "eval", "seed"}},
        {"identify", {"embed", "eval", "seed"}},
        {"transfer", {"embed", "eval", "seed"}},
        {"report", {"embed", "eval", "seed"}}};
    json j{{"stage", stage}};
    for (const auto& b : blocks.at(stage)) j[b] = cfg_json_.at(b);
    for (const auto& d : dependencies(stage)) j["dep_" + d] = stage_hash(d);
    return config_hash(j);
}

std::optional<StageRecord> Lab::record(const std::string& stage) const {
    const auto p = root_ / "records" / (stage + ".json");
    if (!fs::exists(p)) return std::nullopt;
    const json j = json::parse(io::read_text(p));
    StageRecord r;
    r.stage = stage;
    r.config_hash = j.at("config_hash");
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    r.summary = j.at("summary");
    r.seconds = j.value("seconds", 0.0);
    return r;
}

bool Lab::done(const std::string& stage) const {
    const auto r = record(stage);
    return r && r->config_hash == stage_hash(stage) && r->artifacts == hash_tree(dir(stage));
}

void Lab::require(const std::string& stage) const {
    if (!done(stage))
        throw DependencyError(stage, "stage '" + stage + "' has not been run (or is out of date) under " +
                                         root_.string() + "; run `diffmark " + stage + "` first");
}

StageRecord Lab::run(const std::string& stage, bool force) {
    dependencies(stage);
    if (!force && done(stage)) {
        auto r = *record(stage);
        r.skipped = true;
        log(stage, "up to date");
        return r;
    }
    for (const auto& d : dependencies(stage)) require(d);
    const std::string hash = stage_hash(stage);
    const fs::path out = dir(stage);
    // Training keeps its resume checkpoint when the configuration is unchanged.
    const bool resume = stage == "train-watermark" && !force && fs::exists(out / "resume" / "manifest.json") &&
                        fs::exists(out / "resume.hash") && io::read_text(out / "resume.hash") == hash;
    if (!resume) fs::remove_all(out);
    fs::create_directories(out);
    if (stage == "train-watermark") io::write_text(out / "resume.hash", hash);
    const auto t0 = std::chrono::steady_clock::now();
    log(stage, "running");
    StageRecord r;
    r.stage = stage;
    r.config_hash = hash;
    r.summary = run_stage(stage);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.artifacts = hash_tree(out);
    const json j{{"stage", stage},
                 {"config_hash", hash},
                 {"artifacts", r.artifacts},
                 {"summary", r.summary},
                 {"seconds", r.seconds}};
    io::write_text(root_ / "records" / (stage + ".json"), j.dump(2));
    log(stage, "done in " + std::to_string(r.seconds) + " s");
    return r;
}

json Lab::run_stage(const std::string& s) {
    if (s == "gen-data") return gen_data();
    if (s == "train-vae") return train_vae_stage();
    if (s == "train-diffusion") return train_diffusion();
    if (s == "distill-lcm") return distill_lcm();
    if (s == "pretrain-codec") return pretrain_codec();
    if (s == "train-watermark") return train_watermark();
    if (s == "embed") return embed_stage();
    if (s == "detect") return detect_stage();
    if (s == "attack-sweep") return attack_sweep_stage();
    if (s == "identify") return identify_stage();
    if (s == "transfer") return transfer_stage();
    if (s == "report") return report_stage();
    throw ConfigError("unknown stage '" + s + "'");
}

Dataset Lab::data() const {
    require("gen-data");
    return load_dataset(dir("gen-data"));
}

diffusion::ToyVAE Lab::vae() const {
    require("train-vae");
    diffusion::ToyVAE v(cfg_.vae, 0);
    auto st = v.state();
    const auto m = io::load_checkpoint(dir("train-vae"), "vae", st);
    v.mark_trained(m.at("meta").at("scale_factor").get<double>());
    return v;
}

diffusion::ToyDenoiser<float> Lab::denoiser() const {
    require("train-diffusion");
    diffusion::ToyDenoiser<float> d(cfg_.denoiser, 0);
    auto st = d.state();
    io::load_checkpoint(dir("train-diffusion"), "denoiser", st);
    return d;
}

lcm::ConsistencyModel<float> Lab::consistency(const diffusion::ToyDenoiser<float>& teacher) const {
    require("distill-lcm");
    lcm::ConsistencyModel<float> cm(teacher, {}, cfg_.distill.k, cfg_.distill.omega_min);
    auto st = cm.state();
    io::load_checkpoint(dir("distill-lcm"), "lcm", st);
    return cm;
}

std::pair<codec::Encoder<float>, codec::Decoder<float>> Lab::pretrained_codec() const {
    require("pretrain-codec");
    return load_codec(dir("pretrain-codec"), cfg_.codec);
}

std::pair<codec::Encoder<float>, codec::Decoder<float>> Lab::watermark_codec() const {
    require("train-watermark");
    return load_codec(dir("train-watermark") / "codec", cfg_.codec);
}

attacks::Surrogate Lab::surrogate() const {
    require("attack-sweep");
    attacks::Surrogate s(lab::kNumClasses, 0);
    auto st = s.state();
    io::load_checkpoint(dir("attack-sweep") / "surrogate", "surrogate", st);
    return s;
}

std::vector<pipeline::EmbedRequest> Lab::eval_requests(int n, std::uint64_t tag) const {
    Rng rng = Rng::derive(cfg_.seed, {0xe7a1, tag});
    std::set<std::vector<int>> seen;
    std::vector<pipeline::EmbedRequest> out;
    while (static_cast<int>(out.size()) < n) {
        auto s = codec::Secret::random(cfg_.codec.bits, rng);
        if (!seen.insert(s.bits).second) continue;
        const int i = static_cast<int>(out.size());
        out.push_back({std::move(s), i % kNumClasses, cfg_.seed * 1000003 + tag * 7919 + static_cast<std::uint64_t>(i)});
    }
    return out;
}

attacks::AttackContext Lab::attack_context(const diffusion::ToyVAE& vae, const diffusion::ToyDenoiser<float>& den,
                                           const attacks::Surrogate* sur) const {
    return {&vae, &den, diffusion::NoiseSchedule::linear(), sur};
}

json Lab::gen_data() {
    const Dataset d = cfg_.data.ingest.empty() ? generate_dataset(cfg_.data.n, cfg_.data.seed)
                                               : load_dataset(cfg_.data.ingest);
    save_dataset(d, dir("gen-data"));
    std::vector<int> hist(kNumClasses, 0);
    for (int l : d.labels)
        if (l >= 0 && l < kNumClasses) ++hist[l];
    return {{"images", d.size()}, {"histogram", hist}};
}

json Lab::train_vae_stage() {
    const auto d = data();
    diffusion::ToyVAE v(cfg_.vae, cfg_.vae_train.seed);
    const auto r = diffusion::train_vae(v, d.images, cfg_.vae_train);
    io::save_checkpoint(dir("train-vae"), "vae", {{"scale_factor", v.scale_factor()}, {"val_psnr", r.val_psnr}},
                        v.state());
    return {{"val_psnr", r.val_psnr}, {"scale_factor", r.scale_factor}};
}

json Lab::train_diffusion() {
    const auto d = data();
    const auto v = vae();
    const auto lat = v.encode(d.images);
    diffusion::ToyDenoiser<float> den(cfg_.denoiser, cfg_.denoiser_train.seed);
    const auto r = diffusion::train_toy_denoiser(den, lat, d.labels, diffusion::NoiseSchedule::linear(),
                                                 cfg_.denoiser_train);
    io::save_checkpoint(dir("train-diffusion"), "denoiser", {{"val_mse", r.val_mse}, {"config", cfg_.denoiser}},
                        den.state());
    return {{"val_mse", r.val_mse}};
}

json Lab::distill_lcm() {
    const auto d = data();
    const auto v = vae();
    const auto den = denoiser();
    const auto lat = v.encode(d.images);
    const auto sched = diffusion::NoiseSchedule::linear();
    lcm::ConsistencyModel<float> cm(den, {}, cfg_.distill.k, cfg_.distill.omega_min);
    const auto r = lcm::distill(cm, den, sched, lat, d.labels, cfg_.distill);
    Rng rng = Rng::derive(cfg_.distill.seed, {0x5c});
    const auto zT = rng.randn<float>({8, cfg_.vae.latent_channels, 8, 8});
    const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7};
    const double sc = lcm::self_consistency_error(cm, den, sched, zT, labels);
    const double last = r.loss_trace.empty() ? 0.0 : r.loss_trace.back();
    io::save_checkpoint(dir("distill-lcm"), "lcm", {{"self_consistency", sc}, {"final_loss", last}}, cm.state());
    return {{"self_consistency", sc}, {"final_loss", last}};
}

json Lab::pretrain_codec() {
    codec::Encoder<float> enc(cfg_.codec, cfg_.pretrain.seed);
    codec::Decoder<float> dec(cfg_.codec, cfg_.pretrain.seed + 1);
    const auto r = codec::pretrain(enc, dec, cfg_.pretrain);
    Rng rng = Rng::derive(cfg_.pretrain.seed, {0xc05});
    std::vector<codec::Secret> probe;
    for (int i = 0; i < 64; ++i) probe.push_back(codec::Secret::random(cfg_.codec.bits, rng));
    const double cosine = codec::mean_abs_cosine(enc, probe);
    const json meta{{"steps", r.steps},
                    {"converged", r.converged},
                    {"clean_accuracy", r.clean_accuracy},
                    {"noisy_accuracy", r.noisy_accuracy},
                    {"mean_abs_cosine", cosine}};
    save_codec(dir("pretrain-codec"), enc, dec, meta);
    if (!r.converged) log("pretrain-codec", "stop rule not met within max_steps");
    return meta;
}

json Lab::train_watermark() {
    auto [enc, dec] = pretrained_codec();
    const auto v = vae();
    const auto den = denoiser();
    const auto cm = consistency(den);
    const fs::path out = dir("train-watermark");
    training::Trainer tr(enc, dec, {&den, &cm, &v, diffusion::NoiseSchedule::linear()}, cfg_.train);
    if (fs::exists(out / "resume" / "manifest.json")) {
        tr.load(out / "resume");
        log("train-watermark", "resuming at step " + std::to_string(tr.current_step()));
    }
    const long every = std::max<long>(1, cfg_.train.steps / 8);
    const auto hash = stage_hash("train-watermark");
    long reported = tr.current_step();
    training::run_training(tr, out / "metrics.csv", hash, every, out / "resume", [&](const training::StepReport& r) {
        if (r.step - reported >= every) {
            reported = r.step;
            log("train-watermark", "step " + std::to_string(r.step) + " ddim acc " + std::to_string(r.bit_acc_ddim) +
                                       " std " + std::to_string(r.std_delta));
        }
        return false;
    });
    const auto reqs = eval_requests(cfg_.eval.images, 0x7a);
    const auto rt = pipeline::round_trip(reqs, enc, dec, den, v, cfg_.embed);
    auto scaled_cfg = cfg_.embed;
    scaled_cfg.injection = cfg_.train.train_injection;
    const auto rt_train = pipeline::round_trip(reqs, enc, dec, den, v, scaled_cfg);
    const json eval{{"steps", tr.current_step()},
                    {"alpha", enc.alpha().item()},
                    {"inference_injection", training::to_string(cfg_.embed.injection)},
                    {"latent_bit_acc", rt.latent_bit_acc},
                    {"image_bit_acc", rt.image_bit_acc},
                    {"clean_ber", rt.clean_ber},
                    {"train_injection", training::to_string(cfg_.train.train_injection)},
                    {"train_injection_latent_bit_acc", rt_train.latent_bit_acc},
                    {"train_injection_image_bit_acc", rt_train.image_bit_acc}};
    save_codec(out / "codec", enc, dec, eval);
    io::write_text(out / "eval.json", eval.dump(2));
    return eval;
}

json Lab::embed_stage() {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto den = denoiser();
    const auto reqs = eval_requests(cfg_.eval.images, 0xeb);
    const auto e = pipeline::embed(reqs, enc, den, v, cfg_.embed);
    std::vector<std::string> names;
    std::ostringstream csv;
    const auto hash = stage_hash("embed");
    csv << "file,secret_hex,label,seed,config_hash\n";
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        names.push_back(image_name(static_cast<int>(i)));
        csv << names.back() << ',' << ident::to_hex(reqs[i].secret) << ',' << reqs[i].label << ',' << reqs[i].seed
            << ',' << hash << '\n';
    }
    write_image_batch(dir("embed"), names, e.images);
    io::write_text(dir("embed") / "manifest.csv", csv.str());
    return {{"images", reqs.size()}};
}

json Lab::detect_stage() {
    require("embed");
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    std::ifstream f(dir("embed") / "manifest.csv");
    std::string line;
    std::getline(f, line);
    std::vector<std::string> files;
    std::vector<codec::Secret> keys;
    std::vector<Tensor<float>> imgs;
    while (std::getline(f, line)) {
        const auto c = split_csv(line);
        if (c.size() < 2) continue;
        files.push_back(c[0]);
        keys.push_back(ident::from_hex(c[1], cfg_.codec.bits));
        imgs.push_back(io::read_png(dir("embed") / c[0]));
    }
    const auto thr = ident::compute_threshold(cfg_.codec.bits, cfg_.eval.fpr);
    const auto det = pipeline::detect(stack_images(imgs), dec, v, thr, keys);
    const auto hash = stage_hash("detect");
    std::ostringstream csv;
    csv << "file,decoded_hex,matches,detected,ber,config_hash\n";
    long hits = 0;
    double ber = 0;
    for (std::size_t i = 0; i < det.size(); ++i) {
        const double b = 1.0 - static_cast<double>(det[i].matches) / cfg_.codec.bits;
        hits += *det[i].decision;
        ber += b;
        csv << files[i] << ',' << ident::to_hex(det[i].secret) << ',' << det[i].matches << ','
            << (*det[i].decision ? 1 : 0) << ',' << b << ',' << hash << '\n';
    }
    io::write_text(dir("detect") / "detect.csv", csv.str());
    const double n = static_cast<double>(det.size());
    return {{"tau", thr.tau}, {"tpr", hits / n}, {"mean_ber", ber / n}};
}

json Lab::attack_sweep_stage() {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto den = denoiser();
    const auto d = data();
    attacks::Surrogate sur(kNumClasses, cfg_.eval.surrogate.seed);
    const double sur_acc = attacks::train_surrogate(sur, d.images, d.labels, cfg_.eval.surrogate);
    io::save_checkpoint(dir("attack-sweep") / "surrogate", "surrogate", {{"held_out_accuracy", sur_acc}},
                        sur.state());
    const auto reqs = eval_requests(cfg_.eval.images, 0xa5);
    const auto secrets = secrets_of(reqs);
    const auto e = pipeline::embed(reqs, enc, den, v, cfg_.embed);
    const auto ctx = attack_context(v, den, &sur);
    const auto hash = stage_hash("attack-sweep");
    std::ostringstream csv, rho_csv;
    csv << pipeline::sweep_csv_header() << '\n';
    rho_csv << "kind,rho,lo,hi,monotone,config_hash\n";
    json summary{{"surrogate_accuracy", sur_acc}};
    for (auto k : cfg_.eval.sweep_kinds) {
        log("attack-sweep", attacks::to_string(k));
        const auto rows = pipeline::attack_sweep(e.images, secrets, dec, v, ctx, {k}, cfg_.eval.sweep_levels,
                                                 cfg_.eval.fpr, cfg_.seed);
        for (const auto& r : rows) csv << pipeline::sweep_csv_row(r, hash) << '\n';
        const auto iv = pipeline::spearman_bootstrap(rows, cfg_.eval.bootstrap, 0.95, cfg_.seed);
        rho_csv << attacks::to_string(k) << ',' << iv.estimate << ',' << iv.lo << ',' << iv.hi << ','
                << (iv.lo >= 0 ? 1 : 0) << ',' << hash << '\n';
        summary["kinds"][attacks::to_string(k)] = {{"benign_ber", rows.front().mean_ber},
                                                  {"strongest_ber", rows.back().mean_ber},
                                                  {"rho", iv.estimate},
                                                  {"rho_lo", iv.lo}};
    }
    io::write_text(dir("attack-sweep") / "attack_sweep.csv", csv.str());
    io::write_text(dir("attack-sweep") / "spearman.csv", rho_csv.str());
    return summary;
}

json Lab::identify_stage() {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto den = denoiser();
    const auto reqs = eval_requests(cfg_.eval.ident_real, 0x1d);
    const auto real = secrets_of(reqs);
    const auto e = pipeline::embed(reqs, enc, den, v, cfg_.embed);
    const auto det = pipeline::detect(e.images, dec, v);
    const auto db = ident::build_database(real, static_cast<std::size_t>(cfg_.eval.ident_database), cfg_.seed);
    const auto hash = stage_hash("identify");
    std::ostringstream csv;
    csv << "query,true_index,best,distance,rank,correct,config_hash\n";
    long correct = 0;
    double ber = 0;
    for (std::size_t i = 0; i < det.size(); ++i) {
        const auto id = ident::identify(det[i].secret, db, i);
        correct += id.best == i;
        ber += static_cast<double>(codec::hamming(det[i].secret, real[i])) / cfg_.codec.bits;
        csv << i << ',' << i << ',' << id.best << ',' << id.distance << ',' << *id.rank << ','
            << (id.best == i ? 1 : 0) << ',' << hash << '\n';
    }
    io::write_text(dir("identify") / "identify.csv", csv.str());
    const double n = static_cast<double>(det.size());
    const double p = ber / n;
    std::ostringstream sc;
    sc << "N,bits,flip_p,queries,top1,ties,config_hash\n";
    json scaling = json::array();
    for (long N : cfg_.eval.scaling_sizes) {
        const auto t = ident::simulate_identification(cfg_.codec.bits, cfg_.eval.ident_real,
                                                      static_cast<std::size_t>(N), p, cfg_.seed);
        sc << N << ',' << cfg_.codec.bits << ',' << p << ',' << t.queries << ',' << t.top1() << ',' << t.ties << ','
           << hash << '\n';
        scaling.push_back({{"N", N}, {"top1", t.top1()}});
    }
    io::write_text(dir("identify") / "scaling.csv", sc.str());
    return {{"database", db.size()}, {"top1", correct / n}, {"mean_ber", p}, {"simulated", scaling}};
}

json Lab::transfer_stage() {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto base = denoiser();
    const auto d = data();
    const auto lat = v.encode(d.images);
    const auto sched = diffusion::NoiseSchedule::linear();
    auto train_target = [&](const diffusion::DenoiserConfig& dc, std::uint64_t seed, const std::string& name) {
        auto tc = cfg_.denoiser_train;
        tc.seed = seed;
        diffusion::ToyDenoiser<float> den(dc, seed);
        const auto r = diffusion::train_toy_denoiser(den, lat, d.labels, sched, tc);
        io::save_checkpoint(dir("transfer") / name, "denoiser", {{"val_mse", r.val_mse}, {"config", dc}},
                            den.state());
        log("transfer", name + " val mse " + std::to_string(r.val_mse));
        return den;
    };
    const auto seed_b = train_target(cfg_.denoiser, cfg_.eval.transfer_seed, "denoiser_seed");
    auto wide_cfg = cfg_.denoiser;
    wide_cfg.base = cfg_.eval.transfer_wide_base;
    wide_cfg.mid = cfg_.eval.transfer_wide_mid;
    const auto wide = train_target(wide_cfg, cfg_.eval.transfer_seed + 1, "denoiser_wide");

    const auto reqs = eval_requests(cfg_.eval.images, 0x7f);
    const std::vector<attacks::AttackSpec> atk{{attacks::AttackKind::noise, 0.05, cfg_.seed},
                                               {attacks::AttackKind::jpeg, 50, cfg_.seed},
                                               {attacks::AttackKind::blur, 5, cfg_.seed}};
    const auto rows = pipeline::transfer_eval(enc, dec, v, {{"base", &base}, {"seed", &seed_b}, {"wide", &wide}},
                                              reqs, cfg_.embed, atk, attack_context(v, base, nullptr),
                                              cfg_.eval.fpr);
    const auto hash = stage_hash("transfer");
    std::ostringstream csv;
    csv << "model,bit_acc,latent_bit_acc,gap_to_base";
    for (const auto& a : atk) csv << ",tpr_" << attacks::to_string(a.kind);
    csv << ",config_hash\n";
    json summary;
    for (const auto& r : rows) {
        const double gap = rows[0].bit_acc - r.bit_acc;
        csv << r.model << ',' << r.bit_acc << ',' << r.latent_bit_acc << ',' << gap;
        for (const auto& [k, t] : r.attack_tpr) csv << ',' << t;
        csv << ',' << hash << '\n';
        summary[r.model] = {{"bit_acc", r.bit_acc}, {"latent_bit_acc", r.latent_bit_acc}, {"gap", gap}};
    }
    io::write_text(dir("transfer") / "transfer.csv", csv.str());
    return summary;
}

json Lab::report_stage() {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto den = denoiser();
    const fs::path out = dir("report");
    const auto reqs = eval_requests(8, 0x5e);
    const auto wm = pipeline::embed(reqs, enc, den, v, cfg_.embed);
    const auto clean = pipeline::generate_clean(reqs, den, v, enc.config(), cfg_.embed);
    const auto delta = enc.delta(reqs[0].secret);
    const auto rep = pipeline::write_signal_report(out / "signal", delta, wm.images, clean.images,
                                                   cfg_.eval.difference_gain);
    // Per-channel delta maps on a shared symmetric scale.
    const int c = delta.dim(1), s = delta.dim(2);
    float m = 1e-12f;
    for (float x : delta.data) m = std::max(m, std::abs(x));
    for (int k = 0; k < c; ++k) {
        Tensor<float> map({s, s});
        for (int i = 0; i < s * s; ++i) map[i] = 0.5f + 0.5f * delta[k * s * s + i] / m;
        io::write_png_gray(out / "signal" / ("delta_channel" + std::to_string(k) + ".png"), map.ptr(), s, s);
    }

    json stages;
    for (const auto& st : stage_names())
        if (st != "report" && done(st)) stages[st] = record(st)->summary;
    const json summary{{"signal",
                        {{"channel_l2", rep.l2},
                         {"radial", rep.radial},
                         {"band_inside", rep.band.inside},
                         {"band_outside", rep.band.outside},
                         {"radius", rep.radius}}},
                       {"stages", stages}};
    io::write_text(out / "summary.json", summary.dump(2));

    // Timing varies run to run, so it lives outside the hashed stage folder.
    const auto imgs = pipeline::embed(eval_requests(cfg_.eval.latency_images, 0x1a), enc, den, v, cfg_.embed).images;
    const auto lat = pipeline::latency_bench(dec, v, imgs);
    const json timing{{"images", lat.images}, {"mean_ms", lat.mean_ms}, {"median_ms", lat.median_ms},
                      {"p95_ms", lat.p95_ms}};
    io::write_text(root_ / "timing" / "detect_latency.json", timing.dump(2));
    return {{"band_inside", rep.band.inside}, {"band_outside", rep.band.outside}, {"channel_l2", rep.l2}};
}

json Lab::injection_ab() {
    require("distill-lcm");
    require("pretrain-codec");
    const auto v = vae();
    const auto den = denoiser();
    const auto cm = consistency(den);
    const fs::path out = root_ / "injection-ab";
    fs::create_directories(out);
    const auto reqs = eval_requests(cfg_.eval.images, 0x7a);
    const std::vector<training::InjectionScale> policies{training::InjectionScale::one_over_N,
                                                         training::InjectionScale::full};
    std::ostringstream csv;
    csv << "train_injection,inference_injection,latent_bit_acc,image_bit_acc,clean_ber,config_hash\n";
    json summary;
    for (auto train_pol : policies) {
        auto [enc, dec] = pretrained_codec();
        auto tc = cfg_.train;
        tc.train_injection = train_pol;
        const auto name = training::to_string(train_pol);
        training::Trainer tr(enc, dec, {&den, &cm, &v, diffusion::NoiseSchedule::linear()}, tc);
        const auto hash = config_hash(json{{"train", tc}, {"base", stage_hash("train-watermark")}});
        training::run_training(tr, out / ("metrics_" + name + ".csv"), hash);
        for (auto inf_pol : policies) {
            auto ec = cfg_.embed;
            ec.injection = inf_pol;
            const auto rt = pipeline::round_trip(reqs, enc, dec, den, v, ec);
            const auto inf = training::to_string(inf_pol);
            csv << name << ',' << inf << ',' << rt.latent_bit_acc << ',' << rt.image_bit_acc << ',' << rt.clean_ber
                << ',' << hash << '\n';
            summary[name][inf] = {{"latent_bit_acc", rt.latent_bit_acc},
                                  {"image_bit_acc", rt.image_bit_acc},
                                  {"clean_ber", rt.clean_ber}};
            log("injection-ab", name + " -> " + inf + ": latent acc " + std::to_string(rt.latent_bit_acc));
        }
    }
    io::write_text(out / "ab.csv", csv.str());
    io::write_text(out / "ab.json", summary.dump(2));
    return summary;
}

void Lab::embed_to(const EmbedOne& e, const fs::path& out) {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto den = denoiser();
    const pipeline::EmbedRequest req{ident::from_hex(e.secret_hex, cfg_.codec.bits), e.label, e.seed};
    const auto r = pipeline::embed({req}, enc, den, v, cfg_.embed);
    io::write_png(out, r.images.ptr(), r.images.dim(2), r.images.dim(3));
}

json Lab::detect_file(const fs::path& in, const std::string& key_hex, double fpr) {
    auto [enc, dec] = watermark_codec();
    const auto v = vae();
    const auto img = read_image_batch(in);
    const auto thr = ident::compute_threshold(cfg_.codec.bits, fpr);
    std::vector<codec::Secret> keys;
    if (!key_hex.empty()) keys.push_back(ident::from_hex(key_hex, cfg_.codec.bits));
    const auto d = pipeline::detect(img, dec, v, thr, keys)[0];
    json j{{"file", in.string()}, {"decoded_hex", ident::to_hex(d.secret)}, {"bits", cfg_.codec.bits}};
    if (d.decision) {
        j["matches"] = d.matches;
        j["tau"] = thr.tau;
        j["fpr"] = fpr;
        j["detected"] = *d.decision;
    }
    return j;
}

void Lab::attack_file(const fs::path& in, const fs::path& out, const attacks::AttackSpec& spec) {
    const auto img = read_image_batch(in);
    Tensor<float> y;
    switch (attacks::category(spec.kind)) {
        case attacks::Category::regeneration:
        case attacks::Category::adversarial: {
            const auto v = vae();
            diffusion::ToyDenoiser<float> den;
            attacks::Surrogate sur;
            const bool needs_den = spec.kind == attacks::AttackKind::regen_diff ||
                                   spec.kind == attacks::AttackKind::rinse_2xdiff;
            if (needs_den) den = denoiser();
            if (spec.kind == attacks::AttackKind::adv_rn_surrogate) sur = surrogate();
            attacks::AttackContext ctx{&v, needs_den ? &den : nullptr, diffusion::NoiseSchedule::linear(),
                                       spec.kind == attacks::AttackKind::adv_rn_surrogate ? &sur : nullptr};
            y = attacks::apply(img, spec, ctx);
            break;
        }
        default:
            y = attacks::apply_distortion(img, spec);
    }
    io::write_png(out, y.ptr(), y.dim(2), y.dim(3));
}

}  // namespace diffmark::lab
