#pragma once

// Orchestrated multi-process schedule: a model predicts every reply and the
// attach count of every variable, checked after each step while all actors
// are idle.

#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "shmkit/registry.hpp"
#include "support/common.hpp"
#include "support/process.hpp"

namespace testing {

struct ScheduleReport {
    std::size_t steps = 0;
    std::size_t checkpoints = 0;
    std::size_t mismatches = 0;
    std::size_t bad_reads = 0;
    std::size_t final_segments = 0;
    std::size_t max_live = 0;
    std::vector<std::string> notes; // first few mismatches
};

namespace detail {

struct ModelVar {
    int owner = -1;
    bool owner_live = true;
    std::map<int, int> views;

    std::uint64_t expected_count() const
    {
        std::uint64_t n = owner_live ? 1 : 0;
        for (const auto& [a, c] : views) n += static_cast<std::uint64_t>(c);
        return n;
    }
};

} // namespace detail

inline ScheduleReport run_schedule(const std::string& ns, std::size_t steps, std::uint64_t seed, int actor_count = 3)
{
    std::vector<std::unique_ptr<ChildProcess>> actors;
    for (int a = 0; a < actor_count; ++a)
        actors.push_back(std::make_unique<ChildProcess>(helper("shmkit-test-helper"), std::vector<std::string>{"actor", ns}));

    std::map<std::string, detail::ModelVar> vars;
    auto held_by = [&](int actor) {
        int n = 0;
        for (const auto& [name, v] : vars) {
            auto it = v.views.find(actor);
            if (it != v.views.end()) n += it->second;
        }
        return n;
    };
    ScheduleReport report;
    auto note = [&](const std::string& s) {
        ++report.mismatches;
        if (report.notes.size() < 5) report.notes.push_back(s);
    };

    std::mt19937_64 rng(seed);
    const std::vector<std::string> names{"v0", "v1", "v2", "v3", "v4", "v5", "v6", "v7"};
    for (; report.steps < steps; ++report.steps) {
        const int a = static_cast<int>(rng() % static_cast<std::uint64_t>(actor_count));
        const auto& name = names[rng() % names.size()];
        const auto op = rng() % 10;
        std::string command, expected;
        auto it = vars.find(name);
        const bool live = it != vars.end();
        if (op < 2) {
            command = "reg " + name + " " + std::to_string(1 + rng() % 500);
            expected = live ? "err AlreadyExists" : "ok";
            if (!live) vars[name].owner = a;
        } else if (op < 5) {
            command = "view " + name;
            expected = live ? "ok" : "err NotFound";
            if (live) ++it->second.views[a];
        } else if (op < 7) {
            command = "rel_view " + name;
            const bool held = live && it->second.views[a] > 0;
            expected = held ? "ok" : "err NotHeld";
            if (held) --it->second.views[a];
        } else if (op < 8) {
            command = "rel_page " + name;
            const bool owns = live && it->second.owner == a && it->second.owner_live;
            expected = owns ? "ok" : "err NotOwned";
            if (owns) it->second.owner_live = false;
        } else if (op == 9 && rng() % 3 == 0) {
            command = "gc";
            expected = "ok";
            for (auto& [n, v] : vars) {
                v.views.erase(a);
                if (v.owner == a) v.owner_live = false;
            }
        } else {
            command = "read";
            expected = "ok " + std::to_string(held_by(a));
        }
        for (auto v = vars.begin(); v != vars.end();) v = v->second.expected_count() == 0 ? vars.erase(v) : std::next(v);

        const auto reply = actors[static_cast<std::size_t>(a)]->call(command);
        if (reply.rfind("bad", 0) == 0) ++report.bad_reads;
        if (reply != expected) {
            std::ostringstream s;
            s << "step " << report.steps << " actor " << a << ": " << command << " -> '" << reply << "', expected '"
              << expected << "'";
            note(s.str());
        }

        ++report.checkpoints;
        shmkit::Registry probe;
        std::size_t live_vars = 0;
        for (const auto& n : names) {
            auto m = vars.find(n);
            const bool exists = shmkit::segment_exists(shmkit::SegmentName(ns, n, shmkit::SegmentKind::meta));
            if (m == vars.end()) {
                if (exists) note("step " + std::to_string(report.steps) + ": " + n + " outlived its last holder");
                continue;
            }
            ++live_vars;
            std::uint64_t count = 0;
            try {
                count = probe.retrieve_metadata(ns, n).attach_count;
            } catch (const shmkit::Error&) {
            }
            if (count != m->second.expected_count())
                note("step " + std::to_string(report.steps) + ": " + n + " attach_count " + std::to_string(count) +
                     ", expected " + std::to_string(m->second.expected_count()));
        }
        report.max_live = std::max(report.max_live, live_vars);
        if (live_segments(ns) != 2 * live_vars) note("step " + std::to_string(report.steps) + ": segment count off");
        if (report.mismatches > 20) break;
    }

    for (auto& actor : actors)
        if (actor->call("gc") != "ok") note("final gc failed");
    report.final_segments = live_segments(ns);
    for (auto& actor : actors) {
        actor->call("quit");
        actor->close_input();
        if (actor->wait() != 0) note("actor exited nonzero");
    }
    return report;
}

// Every actor runs `steps` random operations at the same time, then cleans up.
inline std::pair<bool, std::size_t> run_concurrent(const std::string& ns, std::size_t steps, std::uint64_t seed,
                                                   int actor_count = 3)
{
    std::vector<std::unique_ptr<ChildProcess>> actors;
    for (int a = 0; a < actor_count; ++a)
        actors.push_back(std::make_unique<ChildProcess>(helper("shmkit-test-helper"), std::vector<std::string>{"actor", ns}));
    for (std::size_t a = 0; a < actors.size(); ++a)
        actors[a]->send("auto " + std::to_string(seed + a) + " " + std::to_string(steps));
    bool ok = true;
    for (auto& actor : actors) ok = actor->recv().rfind("ok ", 0) == 0 && ok;
    const auto left = live_segments(ns);
    for (auto& actor : actors) {
        actor->call("quit");
        actor->close_input();
        ok = actor->wait() == 0 && ok;
    }
    return {ok, left};
}

} // namespace testing
