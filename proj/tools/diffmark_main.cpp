#include <CLI11.hpp>

#include <iostream>

#include "diffmark/core/errors.hpp"
#include "diffmark/lab/stages.hpp"

using namespace diffmark;

namespace {

// Process exit codes.
enum Exit { ok = 0, other = 1, config = 2, dependency = 3, numeric = 4, input = 5 };

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string root;
    bool force = false;
};

void add_common(CLI::App* c, Common& o) {
    c->add_option("--config", o.config_path, "experiment JSON config (defaults when omitted)");
    c->add_option("--override", o.overrides, "key=value override, dotted keys")->take_all();
    c->add_option("--output-root", o.root, "output root (else $DIFFMARK_OUTPUT_ROOT, else ./diffmark_out)");
    c->add_flag("--force", o.force, "rerun even when the stage is up to date");
}

lab::Lab make_lab(const Common& o) {
    auto cfg = lab::load_config(o.config_path, o.overrides);
    const auto root = lab::resolve_root(o.root.empty() ? cfg.output : o.root);
    return lab::Lab(std::move(cfg), root);
}

void print_record(const lab::StageRecord& r) {
    nlohmann::json j{{"stage", r.stage},
                     {"skipped", r.skipped},
                     {"config_hash", r.config_hash},
                     {"artifacts", r.artifacts.size()},
                     {"summary", r.summary}};
    std::cout << j.dump(2) << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffmark: toy-scale latent watermarking lab"};
    app.require_subcommand(1);
    Common common;

    std::vector<std::pair<std::string, CLI::App*>> stages;
    struct {
        std::string secret_hex;
        int label = 0;
        std::uint64_t seed = 0;
        std::string out;
    } em;
    struct {
        std::string in, key_hex;
        double fpr = -1;
    } de;
    for (const auto& name : lab::stage_names()) {
        auto* c = app.add_subcommand(name, "run the " + name + " stage");
        add_common(c, common);
        if (name == "embed") {
            c->add_option("--secret-hex", em.secret_hex, "single image: secret as hex");
            c->add_option("--label", em.label, "single image: class label");
            c->add_option("--seed", em.seed, "single image: noise seed");
            c->add_option("--out", em.out, "single image: output PNG");
        }
        if (name == "detect") {
            c->add_option("--in", de.in, "single image: input PNG");
            c->add_option("--key-hex", de.key_hex, "registered key as hex");
            c->add_option("--fpr", de.fpr, "target false-positive rate (default eval.fpr)");
        }
        stages.emplace_back(name, c);
    }

    auto* all = app.add_subcommand("run", "run the config's stage list in order");
    add_common(all, common);

    struct {
        std::string kind, in, out;
        double strength = 0;
        std::uint64_t seed = 0;
    } at;
    auto* attack = app.add_subcommand("attack", "apply one attack to a PNG");
    add_common(attack, common);
    attack->add_option("--kind", at.kind, "attack kind")->required();
    attack->add_option("--strength", at.strength, "attack strength")->required();
    attack->add_option("--in", at.in, "input PNG")->required();
    attack->add_option("--out", at.out, "output PNG")->required();
    attack->add_option("--seed", at.seed, "attack seed");

    auto* ab = app.add_subcommand("injection-ab", "train under both injection policies and compare");
    add_common(ab, common);

    auto* show = app.add_subcommand("config", "print the resolved configuration");
    add_common(show, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : config;
    }

    try {
        if (show->parsed()) {
            const auto cfg = lab::load_config(common.config_path, common.overrides);
            std::cout << nlohmann::json(cfg).dump(2) << std::endl;
            return ok;
        }
        auto lab = make_lab(common);
        if (attack->parsed()) {
            lab.attack_file(at.in, at.out, {attacks::parse_kind(at.kind), at.strength, at.seed});
            return ok;
        }
        if (ab->parsed()) {
            std::cout << lab.injection_ab().dump(2) << std::endl;
            return ok;
        }
        if (all->parsed()) {
            for (const auto& s : lab.config().stages) print_record(lab.run(s, common.force));
            return ok;
        }
        for (const auto& [name, c] : stages) {
            if (!c->parsed()) continue;
            if (name == "embed" && !em.out.empty()) {
                if (em.secret_hex.empty()) throw ConfigError("embed --out needs --secret-hex");
                lab.embed_to({em.secret_hex, em.label, em.seed}, em.out);
                return ok;
            }
            if (name == "detect" && !de.in.empty()) {
                const double fpr = de.fpr > 0 ? de.fpr : lab.config().eval.fpr;
                std::cout << lab.detect_file(de.in, de.key_hex, fpr).dump(2) << std::endl;
                return ok;
            }
            print_record(lab.run(name, common.force));
        }
        return ok;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return config;
    } catch (const DependencyError& e) {
        std::cerr << "missing dependency [" << e.missing_stage << "]: " << e.what() << std::endl;
        return dependency;
    } catch (const TrainingError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n" << e.loss_trace << std::endl;
        return numeric;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << std::endl;
        return numeric;
    } catch (const ShapeError& e) {
        std::cerr << "invalid input: " << e.what() << std::endl;
        return input;
    } catch (const RangeError& e) {
        std::cerr << "invalid input: " << e.what() << std::endl;
        return input;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return other;
    }
}
