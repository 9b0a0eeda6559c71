#pragma once

// Line-oriented driver for one process of the lifecycle fuzz. Shared by the
// in-process actor and the child executable.
//
//   reg <name> <n>     register a vector whose contents derive from its name
//   view <name>        retrieve a view and verify it
//   read               verify every held view
//   rel_view <name>    release the most recent view of name
//   rel_page <name>    release an owned page
//   gc                 release every view, then every page
//   auto <seed> <n>    n random steps against whatever exists, then gc
//   quit

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "shmkit/error.hpp"
#include "shmkit/registry.hpp"
#include "shmkit/segment.hpp"

namespace testing {

inline double pattern(const std::string& name, std::size_t i)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) h = (h ^ c) * 1099511628211ULL;
    h ^= i * 0x9E3779B97F4A7C15ULL;
    return static_cast<double>(h % 1000003) + 0.25 * static_cast<double>(i % 7);
}

class Actor {
public:
    explicit Actor(std::string ns) : ns_(std::move(ns)) {}

    // "ok ..." on success, "err <Code>" on a library error, "bad ..." on a
    // content mismatch.
    std::string execute(const std::string& line)
    {
        std::istringstream in(line);
        std::string cmd, name;
        in >> cmd;
        try {
            if (cmd == "reg") {
                std::size_t n = 0;
                in >> name >> n;
                std::vector<double> v(n);
                for (std::size_t i = 0; i < n; ++i) v[i] = pattern(name, i);
                registry_.register_variables(ns_, {{name, shmkit::VariableRef::of_vector(v)}});
                return "ok";
            }
            if (cmd == "view") {
                in >> name;
                auto view = registry_.retrieve_view(ns_, name);
                held_.push_back(view);
                ++reads_;
                return verify(view) ? "ok" : "bad " + name;
            }
            if (cmd == "read") return verify_all() ? "ok " + std::to_string(held_.size()) : "bad read";
            if (cmd == "rel_view") {
                in >> name;
                registry_.release_views(ns_, {name});
                for (auto it = held_.rbegin(); it != held_.rend(); ++it) {
                    if (it->variable() == name) {
                        held_.erase(std::next(it).base());
                        break;
                    }
                }
                return "ok";
            }
            if (cmd == "rel_page") {
                in >> name;
                registry_.release_variables(ns_, {name});
                return "ok";
            }
            if (cmd == "gc") {
                registry_.release_namespace(ns_);
                held_.clear();
                return "ok";
            }
            if (cmd == "pid") return "ok " + std::to_string(::getpid());
            if (cmd == "auto") {
                std::uint64_t seed = 0;
                std::size_t steps = 0;
                in >> seed >> steps;
                return run_auto(seed, steps);
            }
            if (cmd == "quit") {
                registry_.shutdown();
                held_.clear();
                return "ok";
            }
            return "err Unknown";
        } catch (const shmkit::Error& e) {
            return "err " + std::string(shmkit::to_string(e.code()));
        }
    }

    std::uint64_t reads() const noexcept { return reads_; }

private:
    bool verify(const shmkit::View& v)
    {
        const auto values = v.values();
        for (std::size_t i = 0; i < values.size(); ++i)
            if (values[i] != pattern(v.variable(), i)) return false;
        return true;
    }

    bool verify_all()
    {
        bool ok = true;
        for (const auto& v : held_) {
            ++reads_;
            ok = verify(v) && ok;
        }
        return ok;
    }

    std::string run_auto(std::uint64_t seed, std::size_t steps)
    {
        std::mt19937_64 rng(seed);
        std::size_t bad = 0, counter = 0;
        std::vector<std::string> mine;
        const std::string prefix = "a" + std::to_string(::getpid()) + "_";
        for (std::size_t s = 0; s < steps; ++s) {
            const auto op = rng() % 6;
            std::string reply;
            if (op == 0 || mine.empty()) {
                const auto name = prefix + std::to_string(counter++);
                reply = execute("reg " + name + " " + std::to_string(1 + rng() % 300));
                if (reply == "ok") mine.push_back(name);
            } else if (op == 1 || op == 2) {
                const auto live = shmkit::list_segments(ns_);
                std::vector<std::string> names;
                for (const auto& n : live)
                    if (n.kind() == shmkit::SegmentKind::meta) names.push_back(n.variable());
                if (names.empty()) continue;
                reply = execute("view " + names[rng() % names.size()]);
            } else if (op == 3) {
                reply = execute("read");
            } else if (op == 4) {
                if (held_.empty()) continue;
                reply = execute("rel_view " + held_[rng() % held_.size()].variable());
            } else {
                const auto k = rng() % mine.size();
                reply = execute("rel_page " + mine[k]);
                mine.erase(mine.begin() + static_cast<std::ptrdiff_t>(k));
            }
            if (reply.rfind("bad", 0) == 0) ++bad;
        }
        if (!verify_all()) ++bad;
        execute("gc");
        return (bad == 0 ? "ok " : "bad ") + std::to_string(reads_) + " " + std::to_string(bad);
    }

    std::string ns_;
    shmkit::Registry registry_;
    std::vector<shmkit::View> held_;
    std::uint64_t reads_ = 0;
};

} // namespace testing
