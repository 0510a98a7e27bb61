// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <queue>
#include <thread>
#include <unordered_set>
#include <vector>

namespace doq {

// Time since the clock's epoch. Virtual clocks start at zero.
using ClockTime = std::chrono::nanoseconds;
using ClockDuration = std::chrono::nanoseconds;

inline constexpr ClockTime kNever = ClockTime::max();

// Abstract time source. All waiting in the library goes through a Clock so
// tests can substitute virtual time.
class Clock {
public:
    virtual ~Clock() = default;

    virtual ClockTime now() = 0;
    virtual void sleep_until(ClockTime deadline) = 0;
    void sleep_for(ClockDuration d) { sleep_until(now() + d); }

    // Runs fn once the clock reaches now() + delay. fn must not block on the
    // clock; it may lock mutexes, schedule, and notify conditions.
    virtual void schedule(ClockDuration delay, std::function<void()> fn) = 0;

    // Actor accounting: virtual time advances only while every registered
    // actor is blocked in a wait on this clock. No-op for real time.
    virtual void register_actor() {}
    virtual void unregister_actor() {}

    // Holds virtual time still across a thread handoff: pin before spawning,
    // unpin from the new thread once it has registered. No-op for real time.
    virtual void pin() {}
    virtual void unpin() {}

protected:
    friend class ClockCondition;

    // Blocks cv until notified or the clock reaches deadline. May wake
    // spuriously; callers re-check predicates in a loop.
    virtual void wait_on(std::condition_variable& cv, std::unique_lock<std::mutex>& lk,
                         ClockTime deadline) = 0;

    // Marks parked waiters of cv wake-pending so virtual time cannot jump
    // past a notification the waiter has not yet observed.
    virtual void on_notify(std::condition_variable* cv) = 0;
};

// Registers the current thread as an actor for the guard's lifetime.
class ActorGuard {
public:
    explicit ActorGuard(Clock& clock) : clock_(clock) { clock_.register_actor(); }
    ~ActorGuard() { clock_.unregister_actor(); }
    ActorGuard(const ActorGuard&) = delete;
    ActorGuard& operator=(const ActorGuard&) = delete;

private:
    Clock& clock_;
};

// Thread whose body runs as a clock actor. The clock is pinned from
// construction until the new thread has registered, so virtual time cannot
// slip through the spawn window.
class ActorThread {
public:
    template <class Fn>
    ActorThread(Clock& clock, Fn fn) {
        clock.pin();
        thread_ = std::thread([&clock, fn = std::move(fn)]() mutable {
            ActorGuard guard(clock);
            clock.unpin();
            fn();
        });
    }
    ~ActorThread() {
        if (thread_.joinable()) thread_.join();
    }
    ActorThread(const ActorThread&) = delete;
    ActorThread& operator=(const ActorThread&) = delete;

    void join() { thread_.join(); }

private:
    std::thread thread_;
};

// Condition variable whose timed waits follow the clock. One associated
// mutex per condition, as with std::condition_variable.
class ClockCondition {
public:
    explicit ClockCondition(Clock& clock) : clock_(clock) {}

    template <class Pred>
    bool wait_until(std::unique_lock<std::mutex>& lk, ClockTime deadline, Pred pred) {
        while (!pred()) {
            if (clock_.now() >= deadline) return pred();
            clock_.wait_on(cv_, lk, deadline);
        }
        return true;
    }

    template <class Pred>
    void wait(std::unique_lock<std::mutex>& lk, Pred pred) {
        wait_until(lk, kNever, std::move(pred));
    }

    void notify_all() {
        clock_.on_notify(&cv_);
        cv_.notify_all();
    }

private:
    Clock& clock_;
    std::condition_variable cv_;
};

namespace detail {

struct TimerEvent {
    ClockTime due;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const TimerEvent& o) const {
        return due != o.due ? due > o.due : seq > o.seq;
    }
};

using TimerQueue =
    std::priority_queue<TimerEvent, std::vector<TimerEvent>, std::greater<TimerEvent>>;

} // namespace detail

// Wall-clock time based on std::chrono::steady_clock, epoch at construction.
class SystemClock : public Clock {
public:
    SystemClock() : epoch_(std::chrono::steady_clock::now()) {
        timer_ = std::thread([this] { timer_loop(); });
    }

    ~SystemClock() override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        timer_cv_.notify_all();
        timer_.join();
    }

    ClockTime now() override {
        return std::chrono::steady_clock::now() - epoch_;
    }

    void sleep_until(ClockTime deadline) override {
        if (deadline == kNever) return; // a forever sleep is a caller bug
        std::this_thread::sleep_until(epoch_ + deadline);
    }

    void schedule(ClockDuration delay, std::function<void()> fn) override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            events_.push({now() + delay, event_seq_++, std::move(fn)});
        }
        timer_cv_.notify_all();
    }

protected:
    void wait_on(std::condition_variable& cv, std::unique_lock<std::mutex>& lk,
                 ClockTime deadline) override {
        ClockDuration bound = std::chrono::hours(1);
        if (deadline != kNever) bound = std::min(bound, deadline - now());
        if (bound.count() <= 0) return;
        cv.wait_for(lk, bound);
    }

    void on_notify(std::condition_variable*) override {}

private:
    void timer_loop() {
        std::unique_lock<std::mutex> lk(mu_);
        while (!stop_) {
            if (events_.empty()) {
                timer_cv_.wait(lk);
                continue;
            }
            ClockTime due = events_.top().due;
            if (now() < due) {
                timer_cv_.wait_until(lk, epoch_ + due);
                continue;
            }
            auto fn = std::move(const_cast<detail::TimerEvent&>(events_.top()).fn);
            events_.pop();
            lk.unlock();
            fn();
            lk.lock();
        }
    }

    std::chrono::steady_clock::time_point epoch_;
    std::mutex mu_;
    std::condition_variable timer_cv_;
    detail::TimerQueue events_;
    std::uint64_t event_seq_ = 0;
    bool stop_ = false;
    std::thread timer_;
};

// Deterministic virtual time. Time jumps to the next waiter deadline or
// scheduled event as soon as every registered actor is parked in a wait and
// no wakeup is still in flight. Systems driven by a VirtualClock must be
// closed: nothing outside the registered actors and scheduled events may
// unblock a waiter.
class VirtualClock : public Clock {
public:
    VirtualClock() {
        advancer_ = std::thread([this] { advance_loop(); });
    }

    ~VirtualClock() override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        advancer_cv_.notify_all();
        advancer_.join();
    }

    ClockTime now() override {
        std::lock_guard<std::mutex> lk(mu_);
        return now_;
    }

    void sleep_until(ClockTime deadline) override {
        std::mutex m;
        ClockCondition cond(*this);
        std::unique_lock<std::mutex> lk(m);
        cond.wait_until(lk, deadline, [] { return false; });
    }

    void schedule(ClockDuration delay, std::function<void()> fn) override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            events_.push({now_ + delay, event_seq_++, std::move(fn)});
        }
        advancer_cv_.notify_all();
    }

    void register_actor() override {
        std::lock_guard<std::mutex> lk(mu_);
        actors_.insert(std::this_thread::get_id());
        ++running_;
    }

    void unregister_actor() override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            actors_.erase(std::this_thread::get_id());
            --running_;
        }
        advancer_cv_.notify_all();
    }

    void pin() override {
        std::lock_guard<std::mutex> lk(mu_);
        ++running_;
    }

    void unpin() override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            --running_;
        }
        advancer_cv_.notify_all();
    }

protected:
    void wait_on(std::condition_variable& cv, std::unique_lock<std::mutex>& lk,
                 ClockTime deadline) override {
        Waiter w{deadline, &cv, false, false};
        {
            std::lock_guard<std::mutex> g(mu_);
            w.actor = actors_.count(std::this_thread::get_id()) > 0;
            if (w.actor) --running_;
            waiters_.push_back(&w);
        }
        advancer_cv_.notify_all();
        // Real-time poll is a safety net only; normal wakeups are notified.
        cv.wait_for(lk, std::chrono::milliseconds(5));
        {
            std::lock_guard<std::mutex> g(mu_);
            std::erase(waiters_, &w);
            if (w.actor) ++running_;
        }
    }

    void on_notify(std::condition_variable* cv) override {
        std::lock_guard<std::mutex> lk(mu_);
        for (Waiter* w : waiters_)
            if (w->cv == cv) w->wake_pending = true;
    }

private:
    struct Waiter {
        ClockTime deadline;
        std::condition_variable* cv;
        bool wake_pending;
        bool actor;
    };

    void advance_loop() {
        std::unique_lock<std::mutex> lk(mu_);
        auto stuck_since = std::chrono::steady_clock::time_point{};
        while (!stop_) {
            // Wake waiters whose deadline has already arrived.
            bool pending = false;
            for (Waiter* w : waiters_) {
                if (!w->wake_pending && w->deadline <= now_) {
                    w->wake_pending = true;
                    w->cv->notify_all();
                }
                pending = pending || w->wake_pending;
            }

            ClockTime target = kNever;
            for (Waiter* w : waiters_)
                if (!w->wake_pending) target = std::min(target, w->deadline);
            if (!events_.empty()) target = std::min(target, events_.top().due);

            if (running_ == 0 && !pending && target != kNever) {
                stuck_since = {};
                now_ = std::max(now_, target);
                while (!events_.empty() && events_.top().due <= now_) {
                    auto fn = std::move(const_cast<detail::TimerEvent&>(events_.top()).fn);
                    events_.pop();
                    lk.unlock();
                    fn();
                    lk.lock();
                }
                continue; // re-sweep deadlines at the new time
            }

            if (running_ == 0 && !pending && target == kNever && !waiters_.empty()) {
                auto real_now = std::chrono::steady_clock::now();
                if (stuck_since == std::chrono::steady_clock::time_point{}) {
                    stuck_since = real_now;
                } else if (real_now - stuck_since > std::chrono::seconds(10)) {
                    std::fprintf(stderr,
                                 "VirtualClock: all actors blocked with no timer or event "
                                 "to wake them\n");
                    std::abort();
                }
            } else {
                stuck_since = {};
            }

            advancer_cv_.wait_for(lk, std::chrono::milliseconds(5));
        }
    }

    std::mutex mu_;
    std::condition_variable advancer_cv_;
    ClockTime now_{0};
    std::unordered_set<std::thread::id> actors_;
    int running_ = 0;
    std::vector<Waiter*> waiters_;
    detail::TimerQueue events_;
    std::uint64_t event_seq_ = 0;
    bool stop_ = false;
    std::thread advancer_;
};

} // namespace doq
